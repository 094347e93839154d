#include "aop/optim.hpp"

#include <cmath>

namespace aop {

Optimizer::Optimizer(ParamStore<float>& store, OptimConfig config) : store_(store), config_(std::move(config)) {
  if (config_.kind != "sgd" && config_.kind != "adam") throw ConfigError("unknown optimizer '" + config_.kind + "'");
  if (!(config_.lr > 0)) throw ConfigError("learning rate must be positive");
  std::vector<std::pair<std::string, Tensor<float>>> weights;
  for (const auto& e : store_.entries())
    if (e.kind == ParamKind::Weight) weights.emplace_back(e.name, e.tensor);
  for (const auto& [name, t] : weights) {
    params_.push_back(t);
    first_.push_back(store_.add("optimizer." + name + ".m", Tensor<float>::zeros(t.shape()), ParamKind::State));
    if (config_.kind == "adam") {
      second_.push_back(store_.add("optimizer." + name + ".v", Tensor<float>::zeros(t.shape()), ParamKind::State));
    }
  }
  step_count_ = store_.add("optimizer.step", Tensor<float>::zeros({1}), ParamKind::State);
}

long Optimizer::steps_taken() const { return static_cast<long>(step_count_[0]); }

double Optimizer::step() {
  double sq = 0;
  for (const auto& p : params_)
    if (p.has_grad())
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DomainError("non-finite gradient norm");
  const double clip = (config_.grad_clip > 0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;

  const long t = steps_taken() + 1;
  step_count_.mutable_data()[0] = static_cast<float>(t);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));

  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto m = first_[k].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip + config_.weight_decay * w[i];
      if (config_.kind == "sgd") {
        m[i] = static_cast<float>(config_.momentum * m[i] + gi);
        w[i] = static_cast<float>(w[i] - config_.lr * m[i]);
      } else {
        auto v = second_[k].mutable_data();
        m[i] = static_cast<float>(config_.beta1 * m[i] + (1 - config_.beta1) * gi);
        v[i] = static_cast<float>(config_.beta2 * v[i] + (1 - config_.beta2) * gi * gi);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        w[i] = static_cast<float>(w[i] - config_.lr * mh / (std::sqrt(vh) + config_.eps));
      }
    }
  }
  return norm;
}

}  // namespace aop
