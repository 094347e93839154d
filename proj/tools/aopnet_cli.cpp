#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "aop/config.hpp"
#include "aop/sc2d.hpp"
#include "aop/train.hpp"

using namespace aop;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  bool no_ifr = false, no_dual_task = false, no_sc = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool ablations) {
  cmd->add_option("-c,--config", o.config_path, "key=value config file");
  cmd->add_option("-s,--set", o.overrides, "override a config key (key=value), repeatable");
  if (ablations) {
    cmd->add_flag("--no-ifr", o.no_ifr, "drop instance feature retrieval");
    cmd->add_flag("--no-dual-task", o.no_dual_task, "drop RV fusion with the 3D pyramid");
    cmd->add_flag("--no-sc", o.no_sc, "use 3x3 Conv blocks instead of SC blocks");
  }
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.no_ifr) cfg.use_ifr = false;
  if (o.no_dual_task) cfg.dual_task = false;
  if (o.no_sc) cfg.use_sc = false;
  validate_config(cfg);
  return cfg;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void dump_images(const std::string& prefix, const Prediction& p, const SceneInput& scene, const RunConfig& cfg) {
  const auto& hm = p.raw.detection.heatmap;
  const int h = hm.dim(1), w = hm.dim(2);
  std::vector<std::uint8_t> heat(static_cast<std::size_t>(h) * w, 0);
  for (int c = 0; c < hm.dim(0); ++c)
    for (std::size_t q = 0; q < heat.size(); ++q) heat[q] = std::max(heat[q], to_byte(hm[c * heat.size() + q]));
  write_pgm(prefix + "_heatmap.pgm", w, h, heat);

  const auto mask = rasterize_instances(scene.points, p.panoptic.instance, cfg.grid, 1);
  std::vector<std::uint8_t> inst(mask.cells.size(), 0);
  for (std::size_t q = 0; q < inst.size(); ++q)
    if (mask.cells[q] > 0) inst[q] = static_cast<std::uint8_t>(55 + (mask.cells[q] * 37) % 200);
  write_pgm(prefix + "_bev_instances.pgm", mask.width, mask.height, inst);

  std::vector<std::uint8_t> sem(scene.rv.index.size(), 0);
  for (std::size_t q = 0; q < sem.size(); ++q) {
    const int i = scene.rv.index[q];
    if (i >= 0) sem[q] = static_cast<std::uint8_t>(50 + 50 * p.panoptic.semantic[i]);
  }
  write_pgm(prefix + "_rv_semantic.pgm", scene.rv.width, scene.rv.height, sem);
}

std::string detection_rows(const std::string& scene_id, const std::vector<Box3D>& boxes) {
  std::string out;
  char buf[512];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", scene_id.c_str(), b.cls, b.score,
                  b.x, b.y, b.z, b.l, b.w, b.h, b.yaw);
    out += buf;
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create directory: " + ec.message());
}

int run(int argc, char** argv) {
  CLI::App app{"aopnet: multi-task LiDAR detection and panoptic segmentation on synthetic scenes"};
  app.require_subcommand(1);

  CommonOptions gen_o, train_o, eval_o, flops_o, infer_o;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_o, false);
  std::string gen_out;
  int gen_n = -1, gen_jobs = 1;
  gen->add_option("-o,--out", gen_out, "dataset directory")->required();
  gen->add_option("-n,--scenes", gen_n, "scene count (default: scene.count)");
  gen->add_option("-j,--jobs", gen_jobs, "parallel scene workers");

  auto* train_cmd = app.add_subcommand("train", "train on a dataset");
  add_common(train_cmd, train_o, true);
  TrainOptions topt;
  train_cmd->add_option("-d,--data", topt.dataset_dir, "dataset directory")->required();
  train_cmd->add_option("-o,--out", topt.checkpoint, "checkpoint path")->required();
  train_cmd->add_option("--log", topt.log_path, "training log CSV (default: <out dir>/training_log.csv)");
  train_cmd->add_option("--resume", topt.resume_from, "continue from this checkpoint");
  bool quiet = false;
  train_cmd->add_flag("-q,--quiet", quiet, "no progress output");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd, eval_o, true);
  std::string eval_ckpt, eval_data, eval_out = "metrics.csv", eval_dump;
  int eval_jobs = 1;
  bool eval_gt = false;
  eval_cmd->add_option("-m,--checkpoint", eval_ckpt, "checkpoint path");
  eval_cmd->add_option("-d,--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("-o,--out", eval_out, "metrics CSV path");
  eval_cmd->add_option("--dump-dir", eval_dump, "write PGM dumps and detections here");
  eval_cmd->add_option("-j,--jobs", eval_jobs, "parallel scene workers");
  eval_cmd->add_flag("--ground-truth", eval_gt, "score the ground truth against itself");

  auto* flops = app.add_subcommand("flops", "analytic parameter / MAC report");
  add_common(flops, flops_o, true);
  std::vector<int> widths{8, 16, 32, 64, 128};
  int ratio = 2;
  bool memory = false, backbone = false;
  flops->add_option("-w,--widths", widths, "channel widths")->delimiter(',');
  flops->add_option("-r,--ratio", ratio, "SC / ConvMLP hidden ratio");
  flops->add_flag("--memory", memory, "add an activations_per_pos column");
  flops->add_flag("--backbone", backbone, "report the configured 2D backbone layer by layer");

  auto* infer = app.add_subcommand("infer", "run a checkpoint on point-cloud files");
  add_common(infer, infer_o, true);
  std::string infer_ckpt, infer_out;
  std::vector<std::string> infer_inputs;
  infer->add_option("-m,--checkpoint", infer_ckpt, "checkpoint path")->required();
  infer->add_option("-o,--out", infer_out, "output directory")->required();
  infer->add_option("inputs", infer_inputs, "AOPC point clouds")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  if (gen->parsed()) {
    const auto cfg = resolve_config(gen_o);
    const int n = gen_n >= 0 ? gen_n : cfg.scenes;
    write_dataset(gen_out, scene_spec(cfg), n, gen_jobs);
    std::cout << "wrote " << n << " scenes to " << gen_out << "\n";
  } else if (train_cmd->parsed()) {
    const auto cfg = resolve_config(train_o);
    if (topt.log_path.empty()) {
      const auto parent = std::filesystem::path(topt.checkpoint).parent_path();
      topt.log_path = (parent.empty() ? std::filesystem::path(".") : parent) / "training_log.csv";
    }
    if (!quiet) topt.progress = &std::cout;
    const auto logs = train(cfg, topt);
    std::cout << "trained " << logs.size() << " steps; checkpoint " << topt.checkpoint << "\n";
  } else if (eval_cmd->parsed()) {
    const auto cfg = resolve_config(eval_o);
    const auto ds = load_dataset(eval_data);
    if (ds.scenes.empty()) throw ConfigError(eval_data + ": dataset has no scenes");
    const auto scenes = load_scenes(ds, cfg);
    EvalResult r;
    if (eval_gt) {
      r = evaluate_ground_truth(scenes);
    } else {
      if (eval_ckpt.empty()) throw ConfigError("eval needs --checkpoint unless --ground-truth is given");
      ParamStore<float> store(cfg.seed);
      Pipeline<float> model(store, cfg);
      Optimizer shadow(store, cfg.optim);  // registers optimizer state so the manifests line up
      load_checkpoint(eval_ckpt, store);
      std::vector<ScenePrediction> preds;
      r = evaluate(model, scenes, cfg, eval_jobs, &preds);
      if (!eval_dump.empty()) {
        ensure_dir(eval_dump);
        std::string dets = "scene_id,class,score,x,y,z,l,w,h,yaw\n";
        for (std::size_t i = 0; i < scenes.size(); ++i) {
          const auto p = predict(model, scenes[i], cfg);
          dump_images(eval_dump + "/" + ds.scenes[i].name, p, scenes[i], cfg);
          dets += detection_rows(ds.scenes[i].name, preds[i].boxes);
        }
        write_file(eval_dump + "/detections.csv", dets);
      }
    }
    write_file(eval_out, metrics_csv(r));
    std::printf("PQ %.2f  RQ %.2f  SQ %.2f  mIoU %.2f  mAP %.4f\n", r.panoptic.pq, r.panoptic.rq, r.panoptic.sq,
                r.panoptic.miou, r.detection.map);
  } else if (flops->parsed()) {
    const auto cfg = resolve_config(flops_o);
    std::ostringstream os;
    os << "layer,params,macs_per_pos,reduction_vs_conv" << (memory ? ",activations_per_pos" : "") << "\n";
    long tp = 0, tm = 0, tb = 0, ta = 0;
    auto row = [&](const CostReport& c, long base_macs) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f", reduction_percent(static_cast<double>(c.macs_per_pos), static_cast<double>(base_macs)));
      os << c.layer << ',' << c.params << ',' << c.macs_per_pos << ',' << buf;
      if (memory) os << ',' << c.activations_per_pos;
      os << '\n';
      tp += c.params;
      tm += c.macs_per_pos;
      tb += base_macs;
      ta += c.activations_per_pos;
    };
    if (backbone) {
      ScBackboneConfig sc;
      sc.in_channels = cfg.c2 * (cfg.grid.Z / 16);
      sc.width1 = cfg.sc_width1;
      sc.width2 = cfg.sc_width2;
      sc.n0 = cfg.sc_n0;
      sc.n1 = cfg.sc_n1;
      sc.n2 = cfg.sc_n2;
      sc.ratio = cfg.sc_ratio;
      sc.use_sc = cfg.use_sc;
      for (const auto& l : describe_backbone(sc)) {
        auto c = count_cost(l);
        const auto base = count_cost(LayerDesc{"conv3x3", l.in_channels, l.out_channels, l.ratio, 3, ""});
        c.layer = l.label + ":" + l.kind;
        row(c, base.macs_per_pos);
      }
    } else {
      for (int w : widths) {
        const auto conv = count_cost("conv3x3", w, ratio);
        for (const char* kind : {"conv3x3", "convmlp_block", "sc_block"}) {
          auto c = count_cost(kind, w, ratio);
          c.layer = std::string(kind) + "@" + std::to_string(w);
          row(c, conv.macs_per_pos);
        }
      }
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", reduction_percent(static_cast<double>(tm), static_cast<double>(tb)));
    os << "total," << tp << ',' << tm << ',' << buf;
    if (memory) os << ',' << ta;
    os << '\n';
    std::cout << os.str();
  } else if (infer->parsed()) {
    const auto cfg = resolve_config(infer_o);
    ParamStore<float> store(cfg.seed);
    Pipeline<float> model(store, cfg);
    Optimizer shadow(store, cfg.optim);
    load_checkpoint(infer_ckpt, store);
    ensure_dir(infer_out);
    std::string dets = "scene_id,class,score,x,y,z,l,w,h,yaw\n";
    for (const auto& path : infer_inputs) {
      const auto pc = read_point_cloud(path);
      const auto scene = prepare_scene(pc, cfg);
      const auto p = predict(model, scene, cfg);
      const std::string id = std::filesystem::path(path).stem().string();
      dump_images(infer_out + "/" + id, p, scene, cfg);
      std::vector<PointLabel> labels;
      for (std::size_t i = 0; i < pc.size(); ++i) {
        labels.push_back({static_cast<std::uint16_t>(std::max(0, p.panoptic.semantic[i])), p.panoptic.instance[i]});
      }
      write_labels(infer_out + "/" + id + ".labels", labels);
      dets += detection_rows(id, p.boxes);
    }
    write_file(infer_out + "/detections.csv", dets);
    std::cout << "inferred " << infer_inputs.size() << " scenes into " << infer_out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const aop::Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: " << e.kind() << ": " << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
