#pragma once

#include <string>
#include <vector>

#include "aop/layers.hpp"

namespace aop {

struct OptimConfig {
  std::string kind = "sgd";  ///< "sgd" (with momentum) or "adam"
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
};

/// First-order optimizer over the Weight entries of a float ParamStore. Its
/// moment buffers and step counter are registered in the store as State
/// entries under "optimizer.", so checkpoints capture them.
class Optimizer {
 public:
  Optimizer(ParamStore<float>& store, OptimConfig config);

  /// Applies one update from the accumulated grads; returns the pre-clip
  /// global gradient norm.
  double step();
  long steps_taken() const;

 private:
  ParamStore<float>& store_;
  OptimConfig config_;
  std::vector<Tensor<float>> params_;
  std::vector<Tensor<float>> first_;
  std::vector<Tensor<float>> second_;
  Tensor<float> step_count_;
};

}  // namespace aop
