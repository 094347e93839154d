#include "aop/train.hpp"

#include "aop/parallel.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace aop {

Dataset load_dataset(const std::string& dir) {
  const std::string path = dir + "/manifest.txt";
  std::istringstream in(read_file(path));
  std::string magic;
  int version = 0, n = -1;
  std::string word;
  if (!(in >> magic >> version) || magic != "aopnet-dataset" || version != 1) {
    throw IoError(path + ": not an aopnet dataset manifest");
  }
  if (!(in >> word >> n) || word != "scenes" || n < 0) throw IoError(path + ": missing scene count");
  Dataset ds;
  ds.dir = dir;
  for (int i = 0; i < n; ++i) {
    DatasetEntry e;
    if (!(in >> e.name >> e.seed)) throw IoError(path + ": expected " + std::to_string(n) + " scene rows");
    ds.scenes.push_back(e);
  }
  return ds;
}

SceneSpec scene_spec(const RunConfig& cfg) {
  SceneSpec s = cfg.scene;
  s.seed = cfg.seed;
  s.grid = cfg.grid;
  s.sensor = cfg.rv;
  s.coarse_factor = kDetectFactor;
  return s;
}

std::vector<SceneInput> load_scenes(const Dataset& ds, const RunConfig& cfg) {
  std::vector<SceneInput> out;
  for (const auto& e : ds.scenes) {
    const std::string stem = ds.dir + "/" + e.name;
    const auto pc = read_point_cloud(stem + ".aopc");
    const auto labels = read_labels(stem + ".labels");
    const auto boxes = read_boxes_csv(stem + "_boxes.csv");
    if (labels.size() != pc.size()) throw IoError(stem + ".labels: label count differs from point count");
    out.push_back(prepare_scene(pc, cfg, &labels, &boxes));
  }
  return out;
}

void save_checkpoint(const std::string& path, const ParamStore<float>& store) {
  std::vector<float> flat;
  for (const auto& e : store.entries()) flat.insert(flat.end(), e.tensor.data().begin(), e.tensor.data().end());
  const int n = static_cast<int>(flat.size());
  write_tensor(path, Tensor<float>::from_data({n}, std::move(flat)));
  write_file(path + ".manifest", store.manifest(true));
}

void load_checkpoint(const std::string& path, ParamStore<float>& store) {
  const std::string stored = read_file(path + ".manifest");
  const std::string expected = store.manifest(true);
  if (stored != expected) {
    std::istringstream a(stored), b(expected);
    std::string la, lb;
    int line = 0;
    while (true) {
      const bool ga = static_cast<bool>(std::getline(a, la)), gb = static_cast<bool>(std::getline(b, lb));
      ++line;
      if (!ga || !gb || la != lb) {
        throw ConfigError("checkpoint incompatible with config at manifest line " + std::to_string(line) +
                          ": checkpoint has '" + (ga ? la : std::string("<end>")) + "', model expects '" +
                          (gb ? lb : std::string("<end>")) + "'");
      }
    }
  }
  const auto flat = read_tensor(path);
  std::size_t pos = 0;
  for (const auto& e : store.entries()) {
    auto dst = Tensor<float>(e.tensor).mutable_data();
    if (pos + dst.size() > flat.numel()) throw IoError(path + ": payload shorter than its manifest");
    for (auto& v : dst) v = flat[pos++];
  }
  if (pos != flat.numel()) throw IoError(path + ": payload longer than its manifest");
}

Trainer::Trainer(const RunConfig& cfg) : cfg_(cfg), store_(cfg.seed) {
  model_ = std::make_unique<Pipeline<float>>(store_, cfg_);
  optimizer_ = std::make_unique<Optimizer>(store_, cfg_.optim);
}

StepLog Trainer::step(const SceneInput& scene, int scene_index) {
  StepLog log;
  log.step = steps_taken();
  log.scene = scene_index;
  log.teacher_forcing = cfg_.use_ifr && log.step < cfg_.teacher_forcing_steps;
  store_.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    auto out = model_->forward(scene, log.teacher_forcing ? MaskSource::GroundTruth : MaskSource::Predicted, true);
    auto loss = joint_loss(out, scene, cfg_, &log.loss);
    tape.backward(loss);
  }
  log.grad_norm = optimizer_->step();
  if (!std::isfinite(log.grad_norm)) throw DomainError("non-finite gradient norm");
  return log;
}

std::string training_log_header() { return "step,scene,teacher_forcing,total,detection,panoptic,grad_norm\n"; }

std::string training_log_row(const StepLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%d,%d,%.9g,%.9g,%.9g,%.9g\n", l.step, l.scene, l.teacher_forcing ? 1 : 0,
                l.loss.total, l.loss.detection, l.loss.panoptic, l.grad_norm);
  return buf;
}

std::vector<StepLog> train(const RunConfig& cfg, const TrainOptions& opt) {
  const auto ds = load_dataset(opt.dataset_dir);
  if (ds.scenes.empty()) throw ConfigError(opt.dataset_dir + ": dataset has no scenes");
  const auto scenes = load_scenes(ds, cfg);
  Trainer trainer(cfg);
  std::string log_text;
  if (!opt.resume_from.empty()) {
    load_checkpoint(opt.resume_from, trainer.store());
    try {
      log_text = read_file(opt.resume_from + ".log.csv");
    } catch (const IoError&) {
      log_text = training_log_header();
    }
  } else {
    log_text = training_log_header();
  }
  std::vector<StepLog> logs;
  while (trainer.steps_taken() < cfg.steps) {
    const int idx = static_cast<int>(trainer.steps_taken() % static_cast<long>(scenes.size()));
    StepLog log;
    try {
      log = trainer.step(scenes[idx], idx);
    } catch (const DomainError& e) {
      const std::string dump = opt.checkpoint + ".nan_dump.txt";
      std::ostringstream os;
      os << "step " << trainer.steps_taken() << "\nscene " << ds.scenes[idx].name << "\nseed " << ds.scenes[idx].seed
         << "\npoints " << scenes[idx].points.size() << "\nboxes " << scenes[idx].boxes.size() << "\nerror "
         << e.what() << "\n";
      for (const auto& b : scenes[idx].boxes) {
        os << "box " << b.cls << ' ' << b.x << ' ' << b.y << ' ' << b.z << ' ' << b.l << ' ' << b.w << ' ' << b.h
           << ' ' << b.yaw << '\n';
      }
      write_file(dump, os.str());
      throw DomainError("non-finite value at step " + std::to_string(trainer.steps_taken()) + " on " +
                        ds.scenes[idx].name + " (" + e.what() + "); dump written to " + dump);
    }
    logs.push_back(log);
    log_text += training_log_row(log);
    if (opt.progress && opt.progress_every > 0 && (log.step % opt.progress_every == 0 || log.step + 1 == cfg.steps)) {
      *opt.progress << "step " << log.step << " loss " << log.loss.total << " (det " << log.loss.detection << ", pan "
                    << log.loss.panoptic << ")" << std::endl;
    }
  }
  if (!opt.checkpoint.empty()) {
    const auto parent = std::filesystem::path(opt.checkpoint).parent_path();
    std::error_code ec;
    if (!parent.empty()) std::filesystem::create_directories(parent, ec);
    if (ec) throw IoError(parent.string() + ": cannot create directory: " + ec.message());
    save_checkpoint(opt.checkpoint, trainer.store());
    write_file(opt.checkpoint + ".log.csv", log_text);
  }
  if (!opt.log_path.empty()) write_file(opt.log_path, log_text);
  return logs;
}

EvalResult evaluate(Pipeline<float>& model, const std::vector<SceneInput>& scenes, const RunConfig& cfg, int jobs,
                    std::vector<ScenePrediction>* predictions) {
  ClassSet classes;
  std::vector<ScenePrediction> preds(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), jobs, [&](int i) {
    if (!scenes[i].has_labels) throw ContractError("evaluate: scene without labels");
    auto p = predict(model, scenes[i], cfg);
    preds[i] = {std::move(p.panoptic), std::move(p.boxes)};
  });
  PanopticAccumulator acc(classes);
  std::vector<DetectionScene> det;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    PanopticLabels gt;
    for (const auto& l : scenes[i].labels) {
      gt.semantic.push_back(l.semantic);
      gt.instance.push_back(l.instance);
    }
    acc.add(preds[i].panoptic, gt);
    det.push_back({preds[i].boxes, scenes[i].boxes});
  }
  if (predictions) *predictions = std::move(preds);
  return {acc.score(), average_precision(det, classes.num_things())};
}

EvalResult evaluate_ground_truth(const std::vector<SceneInput>& scenes) {
  ClassSet classes;
  PanopticAccumulator acc(classes);
  std::vector<DetectionScene> det;
  for (const auto& s : scenes) {
    PanopticLabels gt;
    for (const auto& l : s.labels) {
      gt.semantic.push_back(l.semantic);
      gt.instance.push_back(l.instance);
    }
    acc.add(gt, gt);
    det.push_back({s.boxes, s.boxes});
  }
  return {acc.score(), average_precision(det, classes.num_things())};
}

std::string metrics_csv(const EvalResult& r) {
  static const char* kClassNames[] = {"ground", "wall", "car", "pedestrian", "barrier"};
  static const char* kThingNames[] = {"car", "pedestrian", "barrier"};
  std::ostringstream os;
  char buf[64];
  auto row = [&](const std::string& metric, const std::string& cls, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    os << metric << ',' << cls << ',' << buf << '\n';
  };
  os << "metric,class,value\n";
  const auto& p = r.panoptic;
  row("PQ", "all", p.pq);
  row("RQ", "all", p.rq);
  row("SQ", "all", p.sq);
  row("PQ_th", "all", p.pq_th);
  row("PQ_st", "all", p.pq_st);
  row("mIoU", "all", p.miou);
  for (std::size_t c = 0; c < p.per_class.size() && c < 5; ++c) {
    row("PQ", kClassNames[c], p.per_class[c].pq);
    row("RQ", kClassNames[c], p.per_class[c].rq);
    row("SQ", kClassNames[c], p.per_class[c].sq);
    row("IoU", kClassNames[c], p.per_class[c].iou);
  }
  const auto& d = r.detection;
  row("mAP", "all", d.map);
  for (std::size_t t = 0; t < d.thresholds.size(); ++t) {
    double s = 0;
    int n = 0;
    for (std::size_t c = 0; c < d.ap.size(); ++c)
      if (d.class_present[c]) s += d.ap[c][t], ++n;
    std::snprintf(buf, sizeof buf, "mAP@%gm", d.thresholds[t]);
    row(buf, "all", n ? s / n : 0.0);
  }
  for (std::size_t c = 0; c < d.ap.size() && c < 3; ++c) {
    for (std::size_t t = 0; t < d.thresholds.size(); ++t) {
      std::snprintf(buf, sizeof buf, "AP@%gm", d.thresholds[t]);
      row(buf, kThingNames[c], d.ap[c][t]);
    }
  }
  row("mATE", "all", d.mate);
  row("mASE", "all", d.mase);
  row("mAOE", "all", d.maoe);
  return os.str();
}

}  // namespace aop
