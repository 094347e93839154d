#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "aop/model.hpp"
#include "aop/optim.hpp"

namespace aop {

struct DatasetEntry {
  std::string name;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::string dir;
  std::vector<DatasetEntry> scenes;
};

/// Reads dir/manifest.txt. Throws IoError on a missing or malformed manifest.
Dataset load_dataset(const std::string& dir);
std::vector<SceneInput> load_scenes(const Dataset& ds, const RunConfig& cfg);
SceneSpec scene_spec(const RunConfig& cfg);

/// Checkpoint: every store entry flattened in registration order into one
/// AOPT tensor, with the parameter manifest (names, kinds, shapes) beside
/// it at path + ".manifest".
void save_checkpoint(const std::string& path, const ParamStore<float>& store);
/// Throws ConfigError naming the first mismatching entry when the stored
/// manifest differs from the store's.
void load_checkpoint(const std::string& path, ParamStore<float>& store);

struct StepLog {
  long step = 0;
  int scene = 0;
  bool teacher_forcing = false;
  LossBreakdown loss;
  double grad_norm = 0;
};

class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);
  /// One optimizer step on `scene`. IFR sees ground-truth masks while the
  /// step count is below train.teacher_forcing_steps.
  StepLog step(const SceneInput& scene, int scene_index);
  long steps_taken() const { return optimizer_->steps_taken(); }
  ParamStore<float>& store() { return store_; }
  Pipeline<float>& model() { return *model_; }

 private:
  RunConfig cfg_;
  ParamStore<float> store_;
  std::unique_ptr<Pipeline<float>> model_;
  std::unique_ptr<Optimizer> optimizer_;
};

std::string training_log_header();
std::string training_log_row(const StepLog& log);

struct TrainOptions {
  std::string dataset_dir;
  std::string checkpoint;   ///< output path
  std::string log_path;     ///< training_log.csv
  std::string resume_from;  ///< optional checkpoint to continue from
  std::ostream* progress = nullptr;
  int progress_every = 50;
};

/// Trains until cfg.steps optimizer steps have been taken, cycling the
/// dataset one scene per step. A non-finite value aborts with a dump
/// written to checkpoint + ".nan_dump.txt".
std::vector<StepLog> train(const RunConfig& cfg, const TrainOptions& opt);

struct EvalResult {
  PanopticScore panoptic;
  DetectionScore detection;
};

struct ScenePrediction {
  PanopticLabels panoptic;
  std::vector<Box3D> boxes;
};

/// Predicts every scene (up to `jobs` at a time) and pools the metrics.
EvalResult evaluate(Pipeline<float>& model, const std::vector<SceneInput>& scenes, const RunConfig& cfg, int jobs = 1,
                    std::vector<ScenePrediction>* predictions = nullptr);
/// Scores ground truth against itself through the same metric code path.
EvalResult evaluate_ground_truth(const std::vector<SceneInput>& scenes);
/// metric,class,value rows.
std::string metrics_csv(const EvalResult& r);

}  // namespace aop
