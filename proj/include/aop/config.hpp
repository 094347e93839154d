#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aop/detect.hpp"
#include "aop/ifr.hpp"
#include "aop/optim.hpp"
#include "aop/panoptic.hpp"
#include "aop/scenegen.hpp"

namespace aop {

/// Everything a run needs. Defaults are a desk-scale configuration.
struct RunConfig {
  std::uint64_t seed = 7;
  GridSpec grid;
  RVSpec rv;

  // 3D backbone widths: embedding c0, pyramid c1 (s1, s2) and c2 (s3).
  int c0 = 16, c1 = 32, c2 = 64;
  std::array<int, 3> pan_widths{16, 32, 32};
  int sc_width1 = 32, sc_width2 = 32;
  int sc_n0 = 2, sc_n1 = 5, sc_n2 = 10;
  int sc_ratio = 2;
  int code_width = 16;
  int k_s1 = 16, k_s2 = 25;
  int vfe_ratio = 4, mlp_ratio = 4;
  int det_trunk = 64;
  bool use_ifr = true, dual_task = true, use_sc = true;

  double w_det = 1.0, w_pan = 1.0;
  double w_heatmap = 1.0, w_regression = 1.0;
  double w_ce = 1.0, w_offset = 1.0;

  OptimConfig optim{"adam", 2e-3, 0.9, 0.9, 0.999, 1e-8, 0.0, 10.0};
  int steps = 2000;
  int teacher_forcing_steps = 1000;

  ClusterConfig cluster;
  double score_thresh = 0.3;
  int max_dets = 50;

  SceneSpec scene;
  int scenes = 10;
};

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_schema();

/// Sets one key from its text value; unknown keys and malformed values throw ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses "key = value" lines; '#' starts a comment. Throws ConfigError
/// with the line number on unknown keys or bad values, then validates.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path);
std::string config_to_text(const RunConfig& cfg);

/// Cross-field checks (grid shape, positive widths, known optimizer).
void validate_config(const RunConfig& cfg);

}  // namespace aop
