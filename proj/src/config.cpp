#include "aop/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace aop {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename V>
V parse_value(const std::string& key, const std::string& text);

template <>
int parse_value<int>(const std::string& key, const std::string& text) {
  int v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) throw ConfigError(key + ": expected integer, got '" + text + "'");
  return v;
}

template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ConfigError(key + ": expected unsigned integer, got '" + text + "'");
  }
  return v;
}

template <>
double parse_value<double>(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(key + ": expected number, got '" + text + "'");
  return v;
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + text + "'");
}

template <>
std::string parse_value<std::string>(const std::string&, const std::string& text) {
  return text;
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename V, typename Ref>
ConfigKey key(std::string name, std::string doc, Ref ref) {
  ConfigKey k;
  k.name = name;
  k.doc = std::move(doc);
  k.set = [name, ref](RunConfig& c, const std::string& text) { ref(c) = parse_value<V>(name, text); };
  k.get = [ref](const RunConfig& c) { return format_value(ref(const_cast<RunConfig&>(c))); };
  return k;
}

#define AOP_KEY(type, name, doc, expr) key<type>(name, doc, [](RunConfig& c) -> type& { return expr; })

std::vector<ConfigKey> build_schema() {
  return {
      AOP_KEY(std::uint64_t, "seed", "master seed for initialization and dataset generation", c.seed),
      AOP_KEY(double, "grid.x_min", "BEV range, metres", c.grid.x_min),
      AOP_KEY(double, "grid.x_max", "", c.grid.x_max),
      AOP_KEY(double, "grid.y_min", "", c.grid.y_min),
      AOP_KEY(double, "grid.y_max", "", c.grid.y_max),
      AOP_KEY(double, "grid.z_min", "height range, metres", c.grid.z_min),
      AOP_KEY(double, "grid.z_max", "", c.grid.z_max),
      AOP_KEY(int, "grid.H", "BEV rows (power of two >= 8)", c.grid.H),
      AOP_KEY(int, "grid.W", "BEV columns (power of two >= 8)", c.grid.W),
      AOP_KEY(int, "grid.Z", "height bins (multiple of 16)", c.grid.Z),
      AOP_KEY(int, "rv.height", "range-view rows (beams)", c.rv.height),
      AOP_KEY(int, "rv.width", "range-view columns", c.rv.width),
      AOP_KEY(double, "rv.fov_up", "upper inclination, degrees", c.rv.fov_up_deg),
      AOP_KEY(double, "rv.fov_down", "lower inclination, degrees", c.rv.fov_down_deg),
      AOP_KEY(int, "model.c0", "voxel embedding width", c.c0),
      AOP_KEY(int, "model.c1", "s1/s2 pyramid width", c.c1),
      AOP_KEY(int, "model.c2", "s3 pyramid width", c.c2),
      AOP_KEY(int, "model.pan_w1", "panoptic encoder width, full resolution", c.pan_widths[0]),
      AOP_KEY(int, "model.pan_w2", "panoptic encoder width, 1/2", c.pan_widths[1]),
      AOP_KEY(int, "model.pan_w3", "panoptic encoder width, 1/4", c.pan_widths[2]),
      AOP_KEY(int, "model.sc_width1", "2D backbone width, set 1", c.sc_width1),
      AOP_KEY(int, "model.sc_width2", "2D backbone width, set 2", c.sc_width2),
      AOP_KEY(int, "model.sc_n0", "Conv blocks before set 1", c.sc_n0),
      AOP_KEY(int, "model.sc_n1", "blocks in set 1", c.sc_n1),
      AOP_KEY(int, "model.sc_n2", "blocks in set 2", c.sc_n2),
      AOP_KEY(int, "model.sc_ratio", "SC block hidden ratio", c.sc_ratio),
      AOP_KEY(int, "model.code_width", "IFR MLP output width m (map has 4m channels)", c.code_width),
      AOP_KEY(int, "model.k_s1", "IFR cells per instance at s1", c.k_s1),
      AOP_KEY(int, "model.k_s2", "IFR cells per instance at s2", c.k_s2),
      AOP_KEY(int, "model.vfe_ratio", "IFR VFE hidden ratio", c.vfe_ratio),
      AOP_KEY(int, "model.mlp_ratio", "IFR MLP hidden ratio", c.mlp_ratio),
      AOP_KEY(int, "model.det_trunk", "detection head trunk width", c.det_trunk),
      AOP_KEY(bool, "model.use_ifr", "instance feature retrieval on/off", c.use_ifr),
      AOP_KEY(bool, "model.dual_task", "RV fusion with the 3D pyramid on/off", c.dual_task),
      AOP_KEY(bool, "model.use_sc", "SC blocks (false: 3x3 Conv blocks)", c.use_sc),
      AOP_KEY(double, "loss.w_det", "detection loss weight", c.w_det),
      AOP_KEY(double, "loss.w_pan", "panoptic loss weight", c.w_pan),
      AOP_KEY(double, "loss.w_heatmap", "focal heatmap weight", c.w_heatmap),
      AOP_KEY(double, "loss.w_regression", "box regression L1 weight", c.w_regression),
      AOP_KEY(double, "loss.w_ce", "semantic cross-entropy weight", c.w_ce),
      AOP_KEY(double, "loss.w_offset", "instance offset weight", c.w_offset),
      AOP_KEY(std::string, "optim.kind", "sgd or adam", c.optim.kind),
      AOP_KEY(double, "optim.lr", "learning rate", c.optim.lr),
      AOP_KEY(double, "optim.momentum", "SGD momentum", c.optim.momentum),
      AOP_KEY(double, "optim.beta1", "Adam beta1", c.optim.beta1),
      AOP_KEY(double, "optim.beta2", "Adam beta2", c.optim.beta2),
      AOP_KEY(double, "optim.eps", "Adam epsilon", c.optim.eps),
      AOP_KEY(double, "optim.weight_decay", "L2 weight decay", c.optim.weight_decay),
      AOP_KEY(double, "optim.grad_clip", "global gradient-norm clip (0 = off)", c.optim.grad_clip),
      AOP_KEY(int, "train.steps", "optimizer steps (one scene per step)", c.steps),
      AOP_KEY(int, "train.teacher_forcing_steps", "steps that feed ground-truth masks to IFR", c.teacher_forcing_steps),
      AOP_KEY(double, "cluster.pillar_size", "instance clustering pillar, metres", c.cluster.pillar_size),
      AOP_KEY(int, "cluster.min_points", "smallest kept instance", c.cluster.min_points),
      AOP_KEY(double, "decode.score_thresh", "heatmap peak threshold", c.score_thresh),
      AOP_KEY(int, "decode.max_dets", "detections kept per scene", c.max_dets),
      AOP_KEY(int, "scene.count", "scenes written by gen", c.scenes),
      AOP_KEY(int, "scene.cars", "cars per scene", c.scene.cars),
      AOP_KEY(int, "scene.pedestrians", "pedestrians per scene", c.scene.pedestrians),
      AOP_KEY(int, "scene.barriers", "barriers per scene", c.scene.barriers),
      AOP_KEY(double, "scene.noise_sigma", "range noise sigma, metres", c.scene.noise_sigma),
      AOP_KEY(double, "scene.ground_z", "ground height, metres", c.scene.ground_z),
      AOP_KEY(double, "scene.min_radius", "nearest object distance", c.scene.min_radius),
      AOP_KEY(double, "scene.max_radius", "farthest object distance", c.scene.max_radius),
      AOP_KEY(double, "scene.wall_min", "nearest wall distance", c.scene.wall_min),
      AOP_KEY(double, "scene.wall_max", "farthest wall distance", c.scene.wall_max),
  };
}

#undef AOP_KEY

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_schema()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void validate_config(const RunConfig& c) {
  c.grid.validate();
  if (c.grid.Z % 16 != 0) throw ConfigError("grid.Z must be a multiple of 16");
  if (c.rv.height % 4 != 0 || c.rv.width % 4 != 0 || c.rv.height < 4) {
    throw ConfigError("rv.height and rv.width must be positive multiples of 4");
  }
  if (!(c.rv.fov_up_deg > c.rv.fov_down_deg)) throw ConfigError("rv.fov_up must exceed rv.fov_down");
  for (int v : {c.c0, c.c1, c.c2, c.pan_widths[0], c.pan_widths[1], c.pan_widths[2], c.sc_width1, c.sc_width2,
                c.code_width, c.det_trunk, c.k_s1, c.k_s2, c.vfe_ratio, c.mlp_ratio, c.sc_ratio}) {
    if (v < 1) throw ConfigError("model widths, ratios and K values must be >= 1");
  }
  if (c.vfe_ratio * c.code_width % 2 != 0) throw ConfigError("model.vfe_ratio * model.code_width must be even");
  if (c.sc_n0 < 1 || c.sc_n1 < 0 || c.sc_n2 < 0) throw ConfigError("model.sc_n0 >= 1, sc_n1/sc_n2 >= 0 required");
  if (c.optim.kind != "sgd" && c.optim.kind != "adam") throw ConfigError("optim.kind must be sgd or adam");
  if (!(c.optim.lr > 0)) throw ConfigError("optim.lr must be > 0");
  if (c.steps < 0 || c.teacher_forcing_steps < 0) throw ConfigError("train.steps and teacher_forcing_steps must be >= 0");
  if (c.scenes < 0) throw ConfigError("scene.count must be >= 0");
  for (double w : {c.w_det, c.w_pan, c.w_heatmap, c.w_regression, c.w_ce, c.w_offset}) {
    if (!(w >= 0)) throw ConfigError("loss weights must be >= 0");
  }
  if (!(c.cluster.pillar_size > 0)) throw ConfigError("cluster.pillar_size must be > 0");
}

RunConfig parse_config(const std::string& text, RunConfig cfg) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_config(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  try {
    return parse_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace aop
