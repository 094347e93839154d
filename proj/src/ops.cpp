#include "aop/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>

namespace aop::ops {

namespace {

template <typename T>
using Impl = std::shared_ptr<detail::TensorImpl<T>>;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> data, bool track) {
  for (T v : data) {
    if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite value in output");
  }
  auto out = Tensor<T>::from_data(std::move(shape), std::move(data));
  out.set_requires_grad(track);
  return out;
}

template <typename T>
std::vector<T>& gbuf(const Impl<T>& p) {
  if (p->grad.empty()) p->grad.assign(p->data.size(), T(0));
  return p->grad;
}

template <typename T>
bool needs(const Impl<T>& p) {
  return p && p->requires_grad;
}

void record(std::function<void()> fn) { Tape::active()->record(std::move(fn)); }

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, int rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

template <typename T>
Impl<T> impl_or_null(const Tensor<T>& t) {
  return t.defined() ? t.impl() : nullptr;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  const bool track = wants_grad<T>({&a, &b});
  auto out = finish("add", a.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), ai = a.impl(), bi = b.impl()] {
      if (o->grad.empty()) return;
      for (const auto& p : {ai, bi}) {
        if (!needs(p)) continue;
        auto& g = gbuf(p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  const bool track = wants_grad<T>({&a, &b});
  auto out = finish("sub", a.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), ai = a.impl(), bi = b.impl()] {
      if (o->grad.empty()) return;
      if (needs(ai)) {
        auto& g = gbuf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (needs(bi)) {
        auto& g = gbuf(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  const bool track = wants_grad<T>({&a, &b});
  auto out = finish("mul", a.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), ai = a.impl(), bi = b.impl()] {
      if (o->grad.empty()) return;
      if (needs(ai)) {
        auto& g = gbuf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * bi->data[i];
      }
      if (needs(bi)) {
        auto& g = gbuf(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * s;
  const bool track = wants_grad<T>({&a});
  auto out = finish("scale", a.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), ai = a.impl(), s] {
      if (o->grad.empty()) return;
      auto& g = gbuf(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * s;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + s;
  const bool track = wants_grad<T>({&a});
  auto out = finish("add_scalar", a.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), ai = a.impl()] {
      if (o->grad.empty()) return;
      auto& g = gbuf(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  const bool track = wants_grad<T>({&x});
  auto out = finish("relu", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xi->data[i] > T(0)) g[i] += o->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x[i];
    y[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const bool track = wants_grad<T>({&x});
  auto out = finish("sigmoid", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = o->data[i];
        g[i] += o->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  const bool track = wants_grad<T>({&x});
  auto out = finish("gelu", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), inv_sqrt2] {
      if (o->grad.empty()) return;
      const T inv_sqrt_2pi = T(0.39894228040143267794);
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xi->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        g[i] += o->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_channels: rank-0 input");
  const int c = x.dim(0);
  const std::size_t s = c == 0 ? 0 : x.numel() / static_cast<std::size_t>(c);
  std::vector<T> y(x.numel());
  for (std::size_t p = 0; p < s; ++p) {
    T mx = x[p];
    for (int k = 1; k < c; ++k) mx = std::max(mx, x[k * s + p]);
    T z = 0;
    for (int k = 0; k < c; ++k) {
      y[k * s + p] = std::exp(x[k * s + p] - mx);
      z += y[k * s + p];
    }
    for (int k = 0; k < c; ++k) y[k * s + p] /= z;
  }
  const bool track = wants_grad<T>({&x});
  auto out = finish("softmax_channels", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), c, s] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      const auto& yv = o->data;
      const auto& gy = o->grad;
      for (std::size_t p = 0; p < s; ++p) {
        T dot = 0;
        for (int k = 0; k < c; ++k) dot += gy[k * s + p] * yv[k * s + p];
        for (int k = 0; k < c; ++k) g[k * s + p] += yv[k * s + p] * (gy[k * s + p] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  const bool track = wants_grad<T>({&x});
  auto out = finish<T>("sum", Shape{1}, std::vector<T>{acc}, track);
  if (track) {
    record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (auto& v : g) v += o->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------- structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> y(x.data().begin(), x.data().end());
  const bool track = wants_grad<T>({&x});
  auto out = finish("reshape", std::move(shape), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x, 2);
  const int r = x.dim(0), c = x.dim(1);
  std::vector<T> y(x.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[static_cast<std::size_t>(j) * r + i] = x[static_cast<std::size_t>(i) * c + j];
  const bool track = wants_grad<T>({&x});
  auto out = finish("transpose", {c, r}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), r, c] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(i) * c + j] += o->grad[static_cast<std::size_t>(j) * r + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(ref.size())) throw DimensionError("concat: bad axis");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(ref.size())) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw DimensionError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t out_row = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::vector<T> y(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = static_cast<std::size_t>(p.dim(axis)) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * chunk, chunk, y.begin() + o * out_row + off);
    off += chunk;
  }
  bool track = false;
  if (Tape::active()) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  auto out = finish("concat", out_shape, std::move(y), track);
  if (track) {
    std::vector<Impl<T>> impls;
    std::vector<std::size_t> chunks;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      chunks.push_back(static_cast<std::size_t>(p.dim(axis)) * inner);
    }
    record([o = out.impl(), impls, chunks, offsets, outer, out_row] {
      if (o->grad.empty()) return;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (!needs(impls[k])) continue;
        auto& g = gbuf(impls[k]);
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t i = 0; i < chunks[k]; ++i) g[r * chunks[k] + i] += o->grad[r * out_row + offsets[k] + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& g) {
  if (x.rank() < 1 || g.numel() != static_cast<std::size_t>(x.dim(0))) {
    throw DimensionError("mul_channel: gate " + shape_str(g.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t c = g.numel();
  const std::size_t s = c == 0 ? 0 : x.numel() / c;
  std::vector<T> y(x.numel());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < s; ++p) y[k * s + p] = x[k * s + p] * g[k];
  const bool track = wants_grad<T>({&x, &g});
  auto out = finish("mul_channel", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), gi = g.impl(), c, s] {
      if (o->grad.empty()) return;
      if (needs(xi)) {
        auto& gx = gbuf(xi);
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t p = 0; p < s; ++p) gx[k * s + p] += o->grad[k * s + p] * gi->data[k];
      }
      if (needs(gi)) {
        auto& gg = gbuf(gi);
        for (std::size_t k = 0; k < c; ++k) {
          T acc = 0;
          for (std::size_t p = 0; p < s; ++p) acc += o->grad[k * s + p] * xi->data[k * s + p];
          gg[k] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_spatial(const Tensor<T>& x, const Tensor<T>& g) {
  if (x.rank() < 1 || x.dim(0) == 0 || g.numel() * static_cast<std::size_t>(x.dim(0)) != x.numel()) {
    throw DimensionError("mul_spatial: gate " + shape_str(g.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t c = static_cast<std::size_t>(x.dim(0));
  const std::size_t s = g.numel();
  std::vector<T> y(x.numel());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < s; ++p) y[k * s + p] = x[k * s + p] * g[p];
  const bool track = wants_grad<T>({&x, &g});
  auto out = finish("mul_spatial", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), gi = g.impl(), c, s] {
      if (o->grad.empty()) return;
      if (needs(xi)) {
        auto& gx = gbuf(xi);
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t p = 0; p < s; ++p) gx[k * s + p] += o->grad[k * s + p] * gi->data[p];
      }
      if (needs(gi)) {
        auto& gg = gbuf(gi);
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t p = 0; p < s; ++p) gg[p] += o->grad[k * s + p] * xi->data[k * s + p];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- linear / conv

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("linear weight", w, 2);
  if (x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const int cin = w.dim(0), cout = w.dim(1);
  if (b.defined() && b.numel() != static_cast<std::size_t>(cout)) throw DimensionError("linear: bias extent");
  const int n = cin == 0 ? 0 : static_cast<int>(x.numel() / cin);
  std::vector<T> y(static_cast<std::size_t>(n) * cout);
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int i = 0; i < n; ++i) {
    T* yr = y.data() + static_cast<std::size_t>(i) * cout;
    for (int j = 0; j < cout; ++j) yr[j] = b.defined() ? b[j] : T(0);
    for (int k = 0; k < cin; ++k) {
      const T xv = xd[static_cast<std::size_t>(i) * cin + k];
      const T* wr = wd + static_cast<std::size_t>(k) * cout;
      for (int j = 0; j < cout; ++j) yr[j] += xv * wr[j];
    }
  }
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  const bool track = wants_grad<T>({&x, &w, &b});
  auto out = finish("linear", std::move(out_shape), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), wi = w.impl(), bi = impl_or_null(b), n, cin, cout] {
      if (o->grad.empty()) return;
      CMapR<T> G(o->grad.data(), n, cout);
      if (needs(xi)) {
        MapR<T> GX(gbuf(xi).data(), n, cin);
        GX.noalias() += G * CMapR<T>(wi->data.data(), cin, cout).transpose();
      }
      if (needs(wi)) {
        MapR<T> GW(gbuf(wi).data(), cin, cout);
        GW.noalias() += CMapR<T>(xi->data.data(), n, cin).transpose() * G;
      }
      if (needs(bi)) {
        auto& gb = gbuf(bi);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < cout; ++j) gb[j] += G(i, j);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt) {
  require_rank("conv2d input", x, 3);
  require_rank("conv2d weight", w, 4);
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd");
  if (opt.stride < 1 || opt.padding < 0) throw DimensionError("conv2d: bad stride/padding");
  const int hp = h + 2 * opt.padding, wp = wd + 2 * opt.padding;
  if (kh > hp || kw > wp) throw DimensionError("conv2d: kernel larger than padded input");
  if (b.defined() && b.numel() != static_cast<std::size_t>(cout)) throw DimensionError("conv2d: bias extent");
  const int ho = (hp - kh) / opt.stride + 1, wo = (wp - kw) / opt.stride + 1;
  const int k = cin * kh * kw;
  const int np = ho * wo;
  const int s = opt.stride, pad = opt.padding;

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(k) * np, T(0));
  for (int ci = 0; ci < cin; ++ci)
    for (int a = 0; a < kh; ++a)
      for (int c = 0; c < kw; ++c) {
        T* row = cols->data() + static_cast<std::size_t>((ci * kh + a) * kw + c) * np;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s - pad + a;
          if (iy < 0 || iy >= h) continue;
          const T* src = x.data().data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s - pad + c;
            if (ix >= 0 && ix < wd) row[oy * wo + ox] = src[ix];
          }
        }
      }
  std::vector<T> y(static_cast<std::size_t>(cout) * np);
  {
    MapR<T> Y(y.data(), cout, np);
    Y.noalias() = CMapR<T>(w.data().data(), cout, k) * CMapR<T>(cols->data(), k, np);
    if (b.defined()) {
      for (int co = 0; co < cout; ++co) Y.row(co).array() += b[co];
    }
  }
  const bool track = wants_grad<T>({&x, &w, &b});
  auto out = finish("conv2d", {cout, ho, wo}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), wi = w.impl(), bi = impl_or_null(b), cols, cin, h, wd, cout, kh, kw, ho,
            wo, k, np, s, pad] {
      if (o->grad.empty()) return;
      CMapR<T> G(o->grad.data(), cout, np);
      if (needs(wi)) {
        MapR<T> GW(gbuf(wi).data(), cout, k);
        GW.noalias() += G * CMapR<T>(cols->data(), k, np).transpose();
      }
      if (needs(bi)) {
        auto& gb = gbuf(bi);
        for (int co = 0; co < cout; ++co) gb[co] += G.row(co).sum();
      }
      if (needs(xi)) {
        MatR<T> dcols = CMapR<T>(wi->data.data(), cout, k).transpose() * G;
        auto& gx = gbuf(xi);
        for (int ci = 0; ci < cin; ++ci)
          for (int a = 0; a < kh; ++a)
            for (int c = 0; c < kw; ++c) {
              const T* row = dcols.data() + static_cast<std::size_t>((ci * kh + a) * kw + c) * np;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * s - pad + a;
                if (iy < 0 || iy >= h) continue;
                T* dst = gx.data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * s - pad + c;
                  if (ix >= 0 && ix < wd) dst[ix] += row[oy * wo + ox];
                }
              }
            }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("depthwise_conv2d input", x, 3);
  require_rank("depthwise_conv2d weight", w, 4);
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int k = w.dim(2);
  if (w.dim(0) != c || w.dim(1) != 1 || w.dim(3) != k) {
    throw DimensionError("depthwise_conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (k % 2 == 0) throw DimensionError("depthwise_conv2d: kernel extent must be odd");
  const int pad = k / 2;
  if (k > h + 2 * pad || k > wd + 2 * pad) throw DimensionError("depthwise_conv2d: kernel larger than padded input");
  if (b.defined() && b.numel() != static_cast<std::size_t>(c)) throw DimensionError("depthwise_conv2d: bias extent");
  std::vector<T> y(x.numel(), T(0));
  const T* xd = x.data().data();
  const T* wdat = w.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = xd + static_cast<std::size_t>(ch) * h * wd;
    const T* wc = wdat + static_cast<std::size_t>(ch) * k * k;
    T* yc = y.data() + static_cast<std::size_t>(ch) * h * wd;
    const T bias = b.defined() ? b[ch] : T(0);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) {
        T acc = bias;
        for (int a = 0; a < k; ++a) {
          const int iy = i + a - pad;
          if (iy < 0 || iy >= h) continue;
          for (int bb = 0; bb < k; ++bb) {
            const int ix = j + bb - pad;
            if (ix >= 0 && ix < wd) acc += wc[a * k + bb] * xc[iy * wd + ix];
          }
        }
        yc[i * wd + j] = acc;
      }
  }
  const bool track = wants_grad<T>({&x, &w, &b});
  auto out = finish("depthwise_conv2d", x.shape(), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), wi = w.impl(), bi = impl_or_null(b), c, h, wd, k, pad] {
      if (o->grad.empty()) return;
      const bool gx_on = needs(xi), gw_on = needs(wi), gb_on = needs(bi);
      T* gx = gx_on ? gbuf(xi).data() : nullptr;
      T* gw = gw_on ? gbuf(wi).data() : nullptr;
      T* gb = gb_on ? gbuf(bi).data() : nullptr;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = static_cast<std::size_t>(ch) * h * wd;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < wd; ++j) {
            const T g = o->grad[base + i * wd + j];
            if (gb_on) gb[ch] += g;
            for (int a = 0; a < k; ++a) {
              const int iy = i + a - pad;
              if (iy < 0 || iy >= h) continue;
              for (int bb = 0; bb < k; ++bb) {
                const int ix = j + bb - pad;
                if (ix < 0 || ix >= wd) continue;
                const std::size_t widx = static_cast<std::size_t>(ch) * k * k + a * k + bb;
                if (gw_on) gw[widx] += g * xi->data[base + iy * wd + ix];
                if (gx_on) gx[base + iy * wd + ix] += g * wi->data[widx];
              }
            }
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv3dOptions& opt) {
  require_rank("conv3d input", x, 4);
  require_rank("conv3d weight", w, 5);
  const int cin = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  if (w.dim(1) != cin) throw DimensionError("conv3d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv3d: kernel extents must be odd");
  const auto [sd, sh, sw] = opt.stride;
  const auto [pd, ph, pw] = opt.padding;
  if (sd < 1 || sh < 1 || sw < 1) throw DimensionError("conv3d: bad stride");
  if (kd > d + 2 * pd || kh > h + 2 * ph || kw > wd + 2 * pw) {
    throw DimensionError("conv3d: kernel larger than padded input");
  }
  if (b.defined() && b.numel() != static_cast<std::size_t>(cout)) throw DimensionError("conv3d: bias extent");
  const int od = (d + 2 * pd - kd) / sd + 1;
  const int oh = (h + 2 * ph - kh) / sh + 1;
  const int ow = (wd + 2 * pw - kw) / sw + 1;
  const std::size_t npos = static_cast<std::size_t>(od) * oh * ow;
  if (opt.out_mask && opt.out_mask->size() != npos) throw DimensionError("conv3d: output mask size mismatch");

  auto active = std::make_shared<std::vector<int>>();
  if (opt.out_mask) {
    for (std::size_t p = 0; p < npos; ++p)
      if ((*opt.out_mask)[p]) active->push_back(static_cast<int>(p));
  } else {
    active->resize(npos);
    std::iota(active->begin(), active->end(), 0);
  }
  const int na = static_cast<int>(active->size());
  const int k = cin * kd * kh * kw;
  // Precomputed input offsets per (active output, kernel tap); -1 when out of bounds.
  const int taps = kd * kh * kw;
  auto src_index = std::make_shared<std::vector<int>>(static_cast<std::size_t>(taps) * na);
  for (int n = 0; n < na; ++n) {
    const int p = (*active)[n];
    const int z = p / (oh * ow), yy = (p / ow) % oh, xx = p % ow;
    int t = 0;
    for (int a = 0; a < kd; ++a)
      for (int bb = 0; bb < kh; ++bb)
        for (int c = 0; c < kw; ++c, ++t) {
          const int iz = z * sd - pd + a, iy = yy * sh - ph + bb, ix = xx * sw - pw + c;
          const bool ok = iz >= 0 && iz < d && iy >= 0 && iy < h && ix >= 0 && ix < wd;
          (*src_index)[static_cast<std::size_t>(t) * na + n] = ok ? (iz * h + iy) * wd + ix : -1;
        }
  }
  const std::size_t vol = static_cast<std::size_t>(d) * h * wd;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(k) * na, T(0));
  for (int ci = 0; ci < cin; ++ci) {
    const T* xc = x.data().data() + ci * vol;
    for (int t = 0; t < taps; ++t) {
      T* row = cols->data() + static_cast<std::size_t>(ci * taps + t) * na;
      const int* si = src_index->data() + static_cast<std::size_t>(t) * na;
      for (int n = 0; n < na; ++n)
        if (si[n] >= 0) row[n] = xc[si[n]];
    }
  }
  MatR<T> ya = CMapR<T>(w.data().data(), cout, k) * CMapR<T>(cols->data(), k, na);
  std::vector<T> y(static_cast<std::size_t>(cout) * npos, T(0));
  for (int co = 0; co < cout; ++co) {
    const T bias = b.defined() ? b[co] : T(0);
    for (int n = 0; n < na; ++n) y[co * npos + (*active)[n]] = ya(co, n) + bias;
  }
  const bool track = wants_grad<T>({&x, &w, &b});
  auto out = finish("conv3d", {cout, od, oh, ow}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), wi = w.impl(), bi = impl_or_null(b), cols, active, src_index, cin, cout,
            k, na, taps, vol, npos] {
      if (o->grad.empty()) return;
      MatR<T> ga(cout, na);
      for (int co = 0; co < cout; ++co)
        for (int n = 0; n < na; ++n) ga(co, n) = o->grad[co * npos + (*active)[n]];
      if (needs(wi)) {
        MapR<T> GW(gbuf(wi).data(), cout, k);
        GW.noalias() += ga * CMapR<T>(cols->data(), k, na).transpose();
      }
      if (needs(bi)) {
        auto& gb = gbuf(bi);
        for (int co = 0; co < cout; ++co) gb[co] += ga.row(co).sum();
      }
      if (needs(xi)) {
        MatR<T> dcols = CMapR<T>(wi->data.data(), cout, k).transpose() * ga;
        auto& gx = gbuf(xi);
        for (int ci = 0; ci < cin; ++ci) {
          T* gc = gx.data() + ci * vol;
          for (int t = 0; t < taps; ++t) {
            const T* row = dcols.data() + static_cast<std::size_t>(ci * taps + t) * na;
            const int* si = src_index->data() + static_cast<std::size_t>(t) * na;
            for (int n = 0; n < na; ++n)
              if (si[n] >= 0) gc[si[n]] += row[n];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

namespace {

struct BnCache {
  std::vector<double> invstd;
  std::vector<double> xhat;  // normalized input, same layout as x
};

template <typename T>
void update_running(Tensor<T>& rm, Tensor<T>& rv, int ch, double mean, double var, std::size_t n, double momentum) {
  auto m = rm.mutable_data();
  auto v = rv.mutable_data();
  const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
  m[ch] = static_cast<T>((1.0 - momentum) * m[ch] + momentum * mean);
  v[ch] = static_cast<T>((1.0 - momentum) * v[ch] + momentum * unbiased);
}

// Shared implementation; `at(c, p)` maps channel/position to a flat index.
template <typename T, typename Index>
Tensor<T> batch_norm_impl(const char* name, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt, int channels,
                          std::size_t positions, Index at, bool canonical) {
  if (gamma.numel() != static_cast<std::size_t>(channels) || beta.numel() != static_cast<std::size_t>(channels) ||
      running_mean.numel() != static_cast<std::size_t>(channels) ||
      running_var.numel() != static_cast<std::size_t>(channels)) {
    throw DimensionError(std::string(name) + ": parameter extents do not match " + std::to_string(channels) +
                         " channels");
  }
  if (opt.mask && opt.mask->size() != positions) throw DimensionError(std::string(name) + ": mask size mismatch");
  const Mask* mask = opt.mask;
  auto active = [mask](std::size_t p) { return mask == nullptr || (*mask)[p] != 0; };
  std::size_t n = 0;
  for (std::size_t p = 0; p < positions; ++p) n += active(p) ? 1 : 0;

  auto cache = std::make_shared<BnCache>();
  cache->invstd.assign(channels, 0.0);
  cache->xhat.assign(x.numel(), 0.0);
  std::vector<T> y(x.numel(), T(0));
  std::vector<double> vals;
  for (int c = 0; c < channels; ++c) {
    double mu, var;
    if (opt.training) {
      if (n == 0) continue;
      vals.clear();
      for (std::size_t p = 0; p < positions; ++p)
        if (active(p)) vals.push_back(static_cast<double>(x[at(c, p)]));
      if (canonical) std::sort(vals.begin(), vals.end());
      double s = 0;
      for (double v : vals) s += v;
      mu = s / static_cast<double>(n);
      for (double& v : vals) v = (v - mu) * (v - mu);
      if (canonical) std::sort(vals.begin(), vals.end());
      double ss = 0;
      for (double v : vals) ss += v;
      var = ss / static_cast<double>(n);
      update_running(running_mean, running_var, c, mu, var, n, opt.momentum);
    } else {
      mu = static_cast<double>(running_mean[c]);
      var = static_cast<double>(running_var[c]);
    }
    const double inv = 1.0 / std::sqrt(var + opt.eps);
    cache->invstd[c] = inv;
    for (std::size_t p = 0; p < positions; ++p) {
      if (!active(p)) continue;
      const std::size_t i = at(c, p);
      const double xh = (static_cast<double>(x[i]) - mu) * inv;
      cache->xhat[i] = xh;
      y[i] = static_cast<T>(static_cast<double>(gamma[c]) * xh + static_cast<double>(beta[c]));
    }
  }
  const bool track = wants_grad<T>({&x, &gamma, &beta});
  auto out = finish(name, x.shape(), std::move(y), track);
  if (track) {
    std::shared_ptr<Mask> mask_copy = mask ? std::make_shared<Mask>(*mask) : nullptr;
    record([o = out.impl(), xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), cache, mask_copy, channels, positions,
            at, n, training = opt.training] {
      if (o->grad.empty()) return;
      auto act = [&](std::size_t p) { return !mask_copy || (*mask_copy)[p] != 0; };
      for (int c = 0; c < channels; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t p = 0; p < positions; ++p) {
          if (!act(p)) continue;
          const std::size_t i = at(c, p);
          sum_dy += o->grad[i];
          sum_dy_xhat += o->grad[i] * cache->xhat[i];
        }
        if (needs(gi)) gbuf(gi)[c] += static_cast<T>(sum_dy_xhat);
        if (needs(bi)) gbuf(bi)[c] += static_cast<T>(sum_dy);
        if (!needs(xi) || n == 0) continue;
        auto& gx = gbuf(xi);
        const double g = static_cast<double>(gi->data[c]) * cache->invstd[c];
        const double nn = static_cast<double>(n);
        for (std::size_t p = 0; p < positions; ++p) {
          if (!act(p)) continue;
          const std::size_t i = at(c, p);
          if (training) {
            gx[i] += static_cast<T>(g / nn * (nn * o->grad[i] - sum_dy - cache->xhat[i] * sum_dy_xhat));
          } else {
            gx[i] += static_cast<T>(g * o->grad[i]);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, const BatchNormOptions& opt) {
  if (x.rank() < 2) throw DimensionError("batch_norm: expected [C, ...], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::size_t s = c == 0 ? 0 : x.numel() / c;
  auto at = [s](int ch, std::size_t p) { return static_cast<std::size_t>(ch) * s + p; };
  return batch_norm_impl("batch_norm", x, gamma, beta, running_mean, running_var, opt, c, s, at, false);
}

template <typename T>
Tensor<T> batch_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                          Tensor<T>& running_var, const BatchNormOptions& opt) {
  require_rank("batch_norm_rows", x, 2);
  const std::size_t n = x.dim(0);
  const int c = x.dim(1);
  auto at = [c](int ch, std::size_t p) { return p * static_cast<std::size_t>(c) + ch; };
  return batch_norm_impl("batch_norm_rows", x, gamma, beta, running_mean, running_var, opt, c, n, at, true);
}

// ---------------------------------------------------------------- pooling

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw) {
  require_rank("maxpool2d", x, 3);
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || kh > h || kw > wd) throw DimensionError("maxpool2d: bad window");
  const int ho = (h - kh) / sh + 1, wo = (wd - kw) / sw + 1;
  std::vector<T> y(static_cast<std::size_t>(c) * ho * wo);
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + i * sh) * wd + j * sw;
        for (int a = 0; a < kh; ++a)
          for (int bb = 0; bb < kw; ++bb) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + i * sh + a) * wd + j * sw + bb;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + i) * wo + j;
        y[o] = x[best];
        (*arg)[o] = best;
      }
  const bool track = wants_grad<T>({&x});
  auto out = finish("maxpool2d", {c, ho, wo}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), arg] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < arg->size(); ++i) g[(*arg)[i]] += o->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw) {
  require_rank("avgpool2d", x, 3);
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || kh > h || kw > wd) throw DimensionError("avgpool2d: bad window");
  const int ho = (h - kh) / sh + 1, wo = (wd - kw) / sw + 1;
  const T inv = T(1) / static_cast<T>(kh * kw);
  std::vector<T> y(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        T acc = 0;
        for (int a = 0; a < kh; ++a)
          for (int bb = 0; bb < kw; ++bb) acc += x[(static_cast<std::size_t>(ch) * h + i * sh + a) * wd + j * sw + bb];
        y[(static_cast<std::size_t>(ch) * ho + i) * wo + j] = acc * inv;
      }
  const bool track = wants_grad<T>({&x});
  auto out = finish("avgpool2d", {c, ho, wo}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), c, h, wd, ho, wo, kh, kw, sh, sw, inv] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j) {
            const T gv = o->grad[(static_cast<std::size_t>(ch) * ho + i) * wo + j] * inv;
            for (int a = 0; a < kh; ++a)
              for (int bb = 0; bb < kw; ++bb) g[(static_cast<std::size_t>(ch) * h + i * sh + a) * wd + j * sw + bb] += gv;
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("global_avg_pool: expected [C, ...]");
  const int c = x.dim(0);
  const std::size_t s = c == 0 ? 0 : x.numel() / c;
  if (s == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  std::vector<T> y(c);
  for (int ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < s; ++p) acc += x[ch * s + p];
    y[ch] = acc / static_cast<T>(s);
  }
  const bool track = wants_grad<T>({&x});
  auto out = finish("global_avg_pool", {c}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), c, s] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < s; ++p) g[ch * s + p] += o->grad[ch] / static_cast<T>(s);
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("global_max_pool: expected [C, ...]");
  const int c = x.dim(0);
  const std::size_t s = c == 0 ? 0 : x.numel() / c;
  if (s == 0) throw DimensionError("global_max_pool: empty spatial extent");
  std::vector<T> y(c);
  auto arg = std::make_shared<std::vector<std::size_t>>(c);
  for (int ch = 0; ch < c; ++ch) {
    std::size_t best = ch * s;
    for (std::size_t p = 1; p < s; ++p)
      if (x[ch * s + p] > x[best]) best = ch * s + p;
    y[ch] = x[best];
    (*arg)[ch] = best;
  }
  const bool track = wants_grad<T>({&x});
  auto out = finish("global_max_pool", {c}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), arg] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t ch = 0; ch < arg->size(); ++ch) g[(*arg)[ch]] += o->grad[ch];
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  if (x.rank() < 2 || x.dim(0) == 0) throw DimensionError("channel_mean: expected [C, ...]");
  const int c = x.dim(0);
  const std::size_t s = x.numel() / c;
  std::vector<T> y(s, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < s; ++p) y[p] += x[ch * s + p];
  for (auto& v : y) v /= static_cast<T>(c);
  Shape shape = x.shape();
  shape[0] = 1;
  const bool track = wants_grad<T>({&x});
  auto out = finish("channel_mean", std::move(shape), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), c, s] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < s; ++p) g[ch * s + p] += o->grad[p] / static_cast<T>(c);
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  if (x.rank() < 2 || x.dim(0) == 0) throw DimensionError("channel_max: expected [C, ...]");
  const int c = x.dim(0);
  const std::size_t s = x.numel() / c;
  std::vector<T> y(s);
  auto arg = std::make_shared<std::vector<std::size_t>>(s);
  for (std::size_t p = 0; p < s; ++p) {
    std::size_t best = p;
    for (int ch = 1; ch < c; ++ch)
      if (x[ch * s + p] > x[best]) best = ch * s + p;
    y[p] = x[best];
    (*arg)[p] = best;
  }
  Shape shape = x.shape();
  shape[0] = 1;
  const bool track = wants_grad<T>({&x});
  auto out = finish("channel_max", std::move(shape), std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), arg] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t p = 0; p < arg->size(); ++p) g[(*arg)[p]] += o->grad[p];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  require_rank("upsample_nearest", x, 3);
  if (factor < 1) throw DimensionError("upsample_nearest: factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int ho = h * factor, wo = wd * factor;
  std::vector<T> y(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        y[(static_cast<std::size_t>(ch) * ho + i) * wo + j] =
            x[(static_cast<std::size_t>(ch) * h + i / factor) * wd + j / factor];
  const bool track = wants_grad<T>({&x});
  auto out = finish("upsample_nearest", {c, ho, wo}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), c, h, wd, ho, wo, factor] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j)
            g[(static_cast<std::size_t>(ch) * h + i / factor) * wd + j / factor] +=
                o->grad[(static_cast<std::size_t>(ch) * ho + i) * wo + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------- index ops

template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, const std::vector<int>& idx) {
  if (x.rank() < 2) throw DimensionError("gather_cols: expected [C, P]");
  const int c = x.dim(0);
  const std::size_t p = c == 0 ? 0 : x.numel() / c;
  const std::size_t m = idx.size();
  for (int i : idx) {
    if (i >= static_cast<int>(p)) throw DimensionError("gather_cols: index out of range");
  }
  std::vector<T> y(static_cast<std::size_t>(c) * m, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < m; ++k)
      if (idx[k] >= 0) y[ch * m + k] = x[ch * p + idx[k]];
  const bool track = wants_grad<T>({&x});
  auto out = finish("gather_cols", {c, static_cast<int>(m)}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), idx, c, p, m] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < m; ++k)
          if (idx[k] >= 0) g[ch * p + idx[k]] += o->grad[ch * m + k];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scatter_cols(const Tensor<T>& src, const std::vector<int>& idx, int positions) {
  require_rank("scatter_cols", src, 2);
  const int c = src.dim(0);
  const std::size_t m = src.dim(1);
  if (idx.size() != m) throw DimensionError("scatter_cols: index count mismatch");
  for (int i : idx) {
    if (i >= positions) throw DimensionError("scatter_cols: index out of range");
  }
  const std::size_t p = positions;
  std::vector<T> y(static_cast<std::size_t>(c) * p, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < m; ++k)
      if (idx[k] >= 0) y[ch * p + idx[k]] += src[ch * m + k];
  const bool track = wants_grad<T>({&src});
  auto out = finish("scatter_cols", {c, positions}, std::move(y), track);
  if (track) {
    record([o = out.impl(), si = src.impl(), idx, c, p, m] {
      if (o->grad.empty()) return;
      auto& g = gbuf(si);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < m; ++k)
          if (idx[k] >= 0) g[ch * m + k] += o->grad[ch * p + idx[k]];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scatter_max_cols(const Tensor<T>& src, const std::vector<int>& idx, int positions) {
  require_rank("scatter_max_cols", src, 2);
  const int c = src.dim(0);
  const std::size_t m = src.dim(1);
  if (idx.size() != m) throw DimensionError("scatter_max_cols: index count mismatch");
  const std::size_t p = positions;
  std::vector<T> y(static_cast<std::size_t>(c) * p, T(0));
  auto arg = std::make_shared<std::vector<long>>(static_cast<std::size_t>(c) * p, -1L);
  for (std::size_t k = 0; k < m; ++k) {
    if (idx[k] < 0) continue;
    if (idx[k] >= positions) throw DimensionError("scatter_max_cols: index out of range");
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = ch * p + idx[k];
      const T v = src[ch * m + k];
      if ((*arg)[o] < 0 || v > y[o]) {
        y[o] = v;
        (*arg)[o] = static_cast<long>(ch * m + k);
      }
    }
  }
  const bool track = wants_grad<T>({&src});
  auto out = finish("scatter_max_cols", {c, positions}, std::move(y), track);
  if (track) {
    record([o = out.impl(), si = src.impl(), arg] {
      if (o->grad.empty()) return;
      auto& g = gbuf(si);
      for (std::size_t i = 0; i < arg->size(); ++i)
        if ((*arg)[i] >= 0) g[(*arg)[i]] += o->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_mean_over_depth(const Tensor<T>& v, const Mask& occupancy) {
  require_rank("masked_mean_over_depth", v, 4);
  const int c = v.dim(0), d = v.dim(1), h = v.dim(2), wd = v.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  if (occupancy.size() != plane * d) throw DimensionError("masked_mean_over_depth: occupancy size mismatch");
  auto count = std::make_shared<std::vector<int>>(plane, 0);
  for (int z = 0; z < d; ++z)
    for (std::size_t q = 0; q < plane; ++q) (*count)[q] += occupancy[z * plane + q] ? 1 : 0;
  std::vector<T> y(static_cast<std::size_t>(c) * plane, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t q = 0; q < plane; ++q) {
      if ((*count)[q] == 0) continue;
      T acc = 0;
      for (int z = 0; z < d; ++z)
        if (occupancy[z * plane + q]) acc += v[(static_cast<std::size_t>(ch) * d + z) * plane + q];
      y[ch * plane + q] = acc / static_cast<T>((*count)[q]);
    }
  const bool track = wants_grad<T>({&v});
  auto out = finish("masked_mean_over_depth", {c, h, wd}, std::move(y), track);
  if (track) {
    record([o = out.impl(), vi = v.impl(), occ = std::make_shared<Mask>(occupancy), count, c, d, plane] {
      if (o->grad.empty()) return;
      auto& g = gbuf(vi);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t q = 0; q < plane; ++q) {
          if ((*count)[q] == 0) continue;
          const T gq = o->grad[ch * plane + q] / static_cast<T>((*count)[q]);
          for (int z = 0; z < d; ++z)
            if ((*occ)[z * plane + q]) g[(static_cast<std::size_t>(ch) * d + z) * plane + q] += gq;
        }
    });
  }
  return out;
}

namespace {
void check_offsets(const char* op, const std::vector<int>& offsets, int rows) {
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != rows) {
    throw DimensionError(std::string(op) + ": offsets must start at 0 and end at the row count");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ContractError(std::string(op) + ": empty or unordered set");
  }
}
}  // namespace

template <typename T>
Tensor<T> set_mean_rows(const Tensor<T>& x, const std::vector<int>& offsets) {
  require_rank("set_mean_rows", x, 2);
  check_offsets("set_mean_rows", offsets, x.dim(0));
  const int sets = static_cast<int>(offsets.size()) - 1, d = x.dim(1);
  std::vector<T> y(static_cast<std::size_t>(sets) * d);
  std::vector<T> vals;
  for (int s = 0; s < sets; ++s) {
    const int n = offsets[s + 1] - offsets[s];
    for (int j = 0; j < d; ++j) {
      vals.clear();
      for (int r = offsets[s]; r < offsets[s + 1]; ++r) vals.push_back(x[static_cast<std::size_t>(r) * d + j]);
      std::sort(vals.begin(), vals.end());
      T acc = 0;
      for (T v : vals) acc += v;
      y[static_cast<std::size_t>(s) * d + j] = acc / static_cast<T>(n);
    }
  }
  const bool track = wants_grad<T>({&x});
  auto out = finish("set_mean_rows", {sets, d}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), offsets, sets, d] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int s = 0; s < sets; ++s) {
        const T inv = T(1) / static_cast<T>(offsets[s + 1] - offsets[s]);
        for (int r = offsets[s]; r < offsets[s + 1]; ++r)
          for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(r) * d + j] += o->grad[static_cast<std::size_t>(s) * d + j] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> set_max_rows(const Tensor<T>& x, const std::vector<int>& offsets) {
  require_rank("set_max_rows", x, 2);
  check_offsets("set_max_rows", offsets, x.dim(0));
  const int sets = static_cast<int>(offsets.size()) - 1, d = x.dim(1);
  std::vector<T> y(static_cast<std::size_t>(sets) * d);
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (int s = 0; s < sets; ++s)
    for (int j = 0; j < d; ++j) {
      std::size_t best = static_cast<std::size_t>(offsets[s]) * d + j;
      for (int r = offsets[s] + 1; r < offsets[s + 1]; ++r) {
        const std::size_t i = static_cast<std::size_t>(r) * d + j;
        if (x[i] > x[best]) best = i;
      }
      y[static_cast<std::size_t>(s) * d + j] = x[best];
      (*arg)[static_cast<std::size_t>(s) * d + j] = best;
    }
  const bool track = wants_grad<T>({&x});
  auto out = finish("set_max_rows", {sets, d}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), arg] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (std::size_t i = 0; i < arg->size(); ++i) g[(*arg)[i]] += o->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& x, const std::vector<int>& offsets) {
  require_rank("broadcast_rows", x, 2);
  const int sets = x.dim(0), d = x.dim(1);
  if (static_cast<int>(offsets.size()) != sets + 1) throw DimensionError("broadcast_rows: offsets/set count mismatch");
  const int rows = offsets.back();
  check_offsets("broadcast_rows", offsets, rows);
  std::vector<T> y(static_cast<std::size_t>(rows) * d);
  for (int s = 0; s < sets; ++s)
    for (int r = offsets[s]; r < offsets[s + 1]; ++r)
      for (int j = 0; j < d; ++j) y[static_cast<std::size_t>(r) * d + j] = x[static_cast<std::size_t>(s) * d + j];
  const bool track = wants_grad<T>({&x});
  auto out = finish("broadcast_rows", {rows, d}, std::move(y), track);
  if (track) {
    record([o = out.impl(), xi = x.impl(), offsets, sets, d] {
      if (o->grad.empty()) return;
      auto& g = gbuf(xi);
      for (int s = 0; s < sets; ++s)
        for (int r = offsets[s]; r < offsets[s + 1]; ++r)
          for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(s) * d + j] += o->grad[static_cast<std::size_t>(r) * d + j];
    });
  }
  return out;
}

#define AOP_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                                      \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                            \
  template Tensor<T> transpose(const Tensor<T>&);                                                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                                  \
  template Tensor<T> mul_channel(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul_spatial(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);                 \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv3dOptions&);          \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,     \
                                const BatchNormOptions&);                                                         \
  template Tensor<T> batch_norm_rows(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,            \
                                     Tensor<T>&, const BatchNormOptions&);                                        \
  template Tensor<T> maxpool2d(const Tensor<T>&, int, int, int, int);                                             \
  template Tensor<T> avgpool2d(const Tensor<T>&, int, int, int, int);                                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                           \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                                           \
  template Tensor<T> channel_mean(const Tensor<T>&);                                                              \
  template Tensor<T> channel_max(const Tensor<T>&);                                                               \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                                     \
  template Tensor<T> gather_cols(const Tensor<T>&, const std::vector<int>&);                                      \
  template Tensor<T> scatter_cols(const Tensor<T>&, const std::vector<int>&, int);                                \
  template Tensor<T> scatter_max_cols(const Tensor<T>&, const std::vector<int>&, int);                            \
  template Tensor<T> masked_mean_over_depth(const Tensor<T>&, const Mask&);                                       \
  template Tensor<T> set_mean_rows(const Tensor<T>&, const std::vector<int>&);                                    \
  template Tensor<T> set_max_rows(const Tensor<T>&, const std::vector<int>&);                                     \
  template Tensor<T> broadcast_rows(const Tensor<T>&, const std::vector<int>&);

AOP_INSTANTIATE_OPS(float)
AOP_INSTANTIATE_OPS(double)

}  // namespace aop::ops
