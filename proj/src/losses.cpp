#include "aop/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace aop::losses {

namespace {

template <typename T>
bool tracking(const Tensor<T>& t) {
  return Tape::active() != nullptr && t.requires_grad();
}

template <typename T>
Tensor<T> scalar_out(const char* op, double v, bool track) {
  if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite loss");
  auto out = Tensor<T>::scalar(static_cast<T>(v));
  out.set_requires_grad(track);
  return out;
}

template <typename T>
std::vector<T>& gbuf(const std::shared_ptr<detail::TensorImpl<T>>& p) {
  if (p->grad.empty()) p->grad.assign(p->data.size(), T(0));
  return p->grad;
}

constexpr double kClamp = 1e-4;

}  // namespace

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& prob, const Tensor<T>& target) {
  if (prob.shape() != target.shape()) {
    throw DimensionError("focal_loss: " + shape_str(prob.shape()) + " vs " + shape_str(target.shape()));
  }
  std::size_t npos = 0;
  for (T t : target.data()) {
    if (!(t >= T(0) && t <= T(1))) throw DomainError("focal_loss: target outside [0, 1]");
    if (t == T(1)) ++npos;
  }
  const double norm = static_cast<double>(std::max<std::size_t>(1, npos));
  double total = 0;
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    const double p = std::clamp(static_cast<double>(prob[i]), kClamp, 1.0 - kClamp);
    const double t = target[i];
    if (t == 1.0) {
      total += -(1 - p) * (1 - p) * std::log(p);
    } else {
      total += -std::pow(1 - t, 4) * p * p * std::log(1 - p);
    }
  }
  const bool track = tracking(prob);
  auto out = scalar_out<T>("focal_loss", total / norm, track);
  if (track) {
    Tape::active()->record([o = out.impl(), pi = prob.impl(), ti = target.impl(), norm] {
      if (o->grad.empty()) return;
      auto& g = gbuf(pi);
      const double go = o->grad[0] / norm;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double raw = pi->data[i];
        if (raw < kClamp || raw > 1.0 - kClamp) continue;
        const double p = raw;
        const double t = ti->data[i];
        double d;
        if (t == 1.0) {
          d = 2 * (1 - p) * std::log(p) - (1 - p) * (1 - p) / p;
        } else {
          const double w = std::pow(1 - t, 4);
          d = -w * (2 * p * std::log(1 - p) - p * p / (1 - p));
        }
        g[i] += static_cast<T>(go * d);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& weight) {
  if (pred.shape() != target.shape() || (weight.defined() && weight.numel() != pred.numel())) {
    throw DimensionError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  double wsum = 0, total = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double w = weight.defined() ? static_cast<double>(weight[i]) : 1.0;
    wsum += w;
    total += w * std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  }
  const double value = wsum > 0 ? total / wsum : 0.0;
  const bool track = tracking(pred) && wsum > 0;
  auto out = scalar_out<T>("l1_loss", value, track);
  if (track) {
    Tape::active()->record([o = out.impl(), pi = pred.impl(), ti = target.impl(),
                            wi = weight.defined() ? weight.impl() : nullptr, wsum] {
      if (o->grad.empty()) return;
      auto& g = gbuf(pi);
      const double go = o->grad[0] / wsum;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double w = wi ? static_cast<double>(wi->data[i]) : 1.0;
        const double d = static_cast<double>(pi->data[i]) - static_cast<double>(ti->data[i]);
        const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        g[i] += static_cast<T>(go * w * s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        const std::vector<double>& class_weights) {
  if (logits.rank() < 2) throw DimensionError("cross_entropy: expected logits [C, P]");
  const int c = logits.dim(0);
  const std::size_t p = logits.numel() / static_cast<std::size_t>(c);
  if (labels.size() != p) throw DimensionError("cross_entropy: label count mismatch");
  if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(c)) {
    throw DimensionError("cross_entropy: class weight count mismatch");
  }
  auto weight_of = [&](int y) { return class_weights.empty() ? 1.0 : class_weights[y]; };
  double wsum = 0, total = 0;
  for (std::size_t i = 0; i < p; ++i) {
    const int y = labels[i];
    if (y < 0) continue;
    if (y >= c) throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range");
    double mx = logits[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(logits[k * p + i]));
    double z = 0;
    for (int k = 0; k < c; ++k) z += std::exp(static_cast<double>(logits[k * p + i]) - mx);
    const double nll = mx + std::log(z) - static_cast<double>(logits[y * p + i]);
    wsum += weight_of(y);
    total += weight_of(y) * nll;
  }
  const double value = wsum > 0 ? total / wsum : 0.0;
  const bool track = tracking(logits) && wsum > 0;
  auto out = scalar_out<T>("cross_entropy", value, track);
  if (track) {
    Tape::active()->record([o = out.impl(), li = logits.impl(), labels, class_weights, c, p, wsum] {
      if (o->grad.empty()) return;
      auto& g = gbuf(li);
      const double go = o->grad[0] / wsum;
      std::vector<double> prob(c);
      for (std::size_t i = 0; i < p; ++i) {
        const int y = labels[i];
        if (y < 0) continue;
        const double w = class_weights.empty() ? 1.0 : class_weights[y];
        double mx = li->data[i];
        for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(li->data[k * p + i]));
        double z = 0;
        for (int k = 0; k < c; ++k) {
          prob[k] = std::exp(static_cast<double>(li->data[k * p + i]) - mx);
          z += prob[k];
        }
        for (int k = 0; k < c; ++k) {
          const double d = prob[k] / z - (k == y ? 1.0 : 0.0);
          g[k * p + i] += static_cast<T>(go * w * d);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l2_offset_loss(const Tensor<T>& pred, const Tensor<T>& target, const ops::Mask& fg) {
  if (pred.shape() != target.shape() || pred.rank() < 2 || pred.dim(0) != 2) {
    throw DimensionError("l2_offset_loss: expected matching [2, P] tensors");
  }
  const std::size_t p = pred.numel() / 2;
  if (fg.size() != p) throw DimensionError("l2_offset_loss: mask size mismatch");
  std::size_t n = 0;
  double total = 0;
  for (std::size_t i = 0; i < p; ++i) {
    if (!fg[i]) continue;
    ++n;
    for (std::size_t k = 0; k < 2; ++k) {
      const double d = static_cast<double>(pred[k * p + i]) - static_cast<double>(target[k * p + i]);
      total += d * d;
    }
  }
  const double value = n > 0 ? total / static_cast<double>(n) : 0.0;
  const bool track = tracking(pred) && n > 0;
  auto out = scalar_out<T>("l2_offset_loss", value, track);
  if (track) {
    Tape::active()->record([o = out.impl(), pi = pred.impl(), ti = target.impl(), mask = fg, p, n] {
      if (o->grad.empty()) return;
      auto& g = gbuf(pi);
      const double go = o->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < p; ++i) {
        if (!mask[i]) continue;
        for (std::size_t k = 0; k < 2; ++k) {
          const double d = static_cast<double>(pi->data[k * p + i]) - static_cast<double>(ti->data[k * p + i]);
          g[k * p + i] += static_cast<T>(go * 2.0 * d);
        }
      }
    });
  }
  return out;
}

#define AOP_INSTANTIATE_LOSSES(T)                                                                     \
  template Tensor<T> focal_loss(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&, const std::vector<double>&); \
  template Tensor<T> l2_offset_loss(const Tensor<T>&, const Tensor<T>&, const ops::Mask&);

AOP_INSTANTIATE_LOSSES(float)
AOP_INSTANTIATE_LOSSES(double)

}  // namespace aop::losses
