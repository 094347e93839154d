#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aop/layers.hpp"
#include "aop/ops.hpp"
#include "aop/rng.hpp"

namespace aop::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

/// sum(y * r) for a fixed random r, so that every output entry contributes
/// with a distinct weight.
template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<T> r(y.numel());
  for (auto& v : r) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return ops::sum(ops::mul(y, Tensor<T>::from_data(y.shape(), std::move(r))));
}

struct GradReport {
  double max_rel_err = 0;
  std::string worst;
};

/// Compares float32 reverse-mode gradients of `f` against float64 central
/// differences. `f` is a generic callable taking std::vector<Tensor<T>>&
/// and returning a scalar Tensor<T>. Error per input tensor is
/// ||analytic - fd|| / max(1e-8, ||fd||) over the sampled entries; the
/// report carries the maximum over inputs.
template <typename F>
GradReport check_gradients(F&& f, const std::vector<Tensor<double>>& inputs, std::size_t max_samples = 64,
                           double h = 1e-5, std::uint64_t seed = 5) {
  std::vector<Tensor<float>> fin;
  for (const auto& x : inputs) {
    auto t = x.cast<float>();
    t.set_requires_grad(true);
    fin.push_back(t);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor<float> loss = f(fin);
    tape.backward(loss);
  }
  GradReport report;
  Rng rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].numel();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > max_samples) {
      for (std::size_t i = 0; i < max_samples; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(max_samples);
    }
    double num = 0, den = 0;
    for (std::size_t i : idx) {
      auto eval = [&](double delta) {
        std::vector<Tensor<double>> xs;
        for (const auto& x : inputs) xs.push_back(x.clone());
        xs[k].mutable_data()[i] += delta;
        NoGradScope ng;
        return f(xs).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double an = fin[k].has_grad() ? static_cast<double>(fin[k].grad()[i]) : 0.0;
      num += (an - fd) * (an - fd);
      den += fd * fd;
    }
    const double err = std::sqrt(num) / std::max(1e-8, std::sqrt(den));
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst = "input " + std::to_string(k);
    }
  }
  return report;
}

namespace detail {

template <typename F, typename A>
double sampled_error(F&& eval, Tensor<double> target, std::span<const A> analytic, std::size_t max_samples,
                     double h, Rng& rng) {
  const std::size_t n = target.numel();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n > max_samples) {
    for (std::size_t i = 0; i < max_samples; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(max_samples);
  }
  double num = 0, den = 0;
  auto data = target.mutable_data();
  for (std::size_t i : idx) {
    const double keep = data[i];
    data[i] = keep + h;
    const double up = eval();
    data[i] = keep - h;
    const double down = eval();
    data[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double an = analytic.empty() ? 0.0 : static_cast<double>(analytic[i]);
    num += (an - fd) * (an - fd);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(1e-8, std::sqrt(den));
}

}  // namespace detail

/// Gradient check over every weight of a module plus its inputs. `make` is
/// a generic lambda taking ParamStore<T>& that builds the module and
/// returns a callable mapping std::vector<Tensor<T>> to a scalar loss. The
/// float store is a copy of the double store so both paths share weights.
/// `include`, when set, restricts the checked weights by name.
template <typename Make, typename A = float>
GradReport check_module_gradients(Make&& make, const std::vector<Tensor<double>>& inputs,
                                  std::size_t max_samples = 24, double h = 1e-5, std::uint64_t seed = 11,
                                  const std::function<bool(const std::string&)>& include = {}) {
  ParamStore<double> pd(seed);
  auto fd = make(pd);
  ParamStore<A> pf(seed);
  auto ff = make(pf);
  copy_params(pd, pf);
  copy_params(pf, pd);
  std::vector<Tensor<double>> xd;
  std::vector<Tensor<A>> xf;
  for (const auto& x : inputs) {
    auto r = x.cast<A>();
    xd.push_back(r.template cast<double>());
    r.set_requires_grad(true);
    xf.push_back(r);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ff(xf));
  }
  auto eval = [&] {
    NoGradScope ng;
    return fd(xd).item();
  };
  GradReport report;
  Rng rng(seed);
  auto consider = [&](double err, const std::string& name) {
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst = name;
    }
  };
  for (const auto& e : pd.entries()) {
    if (e.kind != ParamKind::Weight || (include && !include(e.name))) continue;
    const auto f = pf.get(e.name);
    consider(detail::sampled_error(eval, e.tensor, f.grad(), max_samples, h, rng), e.name);
  }
  for (std::size_t k = 0; k < xd.size(); ++k) {
    consider(detail::sampled_error(eval, xd[k], xf[k].grad(), max_samples, h, rng), "input " + std::to_string(k));
  }
  return report;
}

}  // namespace aop::testing
