#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "aop/tensor.hpp"

// Differentiable tensor primitives. Every op records a backward closure on
// the active Tape when at least one input requires grad, and throws
// DomainError if it produces a non-finite value.
//
// Layout conventions: feature maps are channel-first ([C,H,W] and
// [C,D,H,W]); point/member sets are row-major [N,D].
namespace aop::ops {

using Mask = std::vector<std::uint8_t>;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
/// Softmax across axis 0 of a [C, ...] tensor, independently per trailing position.
template <typename T> Tensor<T> softmax_channels(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// x[C, ...] * g[C], broadcast over trailing positions.
template <typename T> Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& g);
/// x[C, ...] * g[...], broadcast over channels. g must hold numel(x)/C values.
template <typename T> Tensor<T> mul_spatial(const Tensor<T>& x, const Tensor<T>& g);

/// y = x * W + b along the last axis. W is [Cin, Cout]; b may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};
/// Cross-correlation of x[Cin,H,W] with w[Cout,Cin,k,k]; b may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt);

/// Per-channel k x k convolution, stride 1, same padding. w is [C,1,k,k].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

struct Conv3dOptions {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{1, 1, 1};
  /// When set, only these output positions are computed; the rest are zero.
  /// Equivalent to masking a dense convolution's output.
  const Mask* out_mask = nullptr;
};
/// Cross-correlation of x[Cin,D,H,W] with w[Cout,Cin,kd,kh,kw].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv3dOptions& opt);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
  /// Optional position mask over the trailing extent; statistics use only
  /// masked positions and unmasked outputs are zero.
  const Mask* mask = nullptr;
};
/// Channel-first batch norm over x[C, ...]. In training mode the running
/// buffers are updated in place (unbiased variance, PyTorch convention).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt);
/// Batch norm over the rows of x[N, C]. Statistics are summed in a
/// canonical (sorted) order so the result does not depend on row order.
template <typename T>
Tensor<T> batch_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt);

/// Max pooling on x[C,H,W]; ties go to the first position in scan order.
template <typename T> Tensor<T> maxpool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw);
template <typename T> Tensor<T> avgpool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw);
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T> Tensor<T> global_max_pool(const Tensor<T>& x);
/// Mean / max across channels: x[C, ...] -> [1, ...].
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T> Tensor<T> channel_max(const Tensor<T>& x);
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

/// out[:, m] = x[:, idx[m]], or zeros where idx[m] < 0. x is [C, P].
template <typename T> Tensor<T> gather_cols(const Tensor<T>& x, const std::vector<int>& idx);
/// out[:, idx[m]] += src[:, m] into a [C, P] zero tensor; negative idx skipped.
template <typename T> Tensor<T> scatter_cols(const Tensor<T>& src, const std::vector<int>& idx, int positions);
/// out[:, p] = max over m with idx[m] == p of src[:, m]; zero where nothing lands.
/// Gradient goes to the first maximising source.
template <typename T>
Tensor<T> scatter_max_cols(const Tensor<T>& src, const std::vector<int>& idx, int positions);

/// Mean over depth of v[C,D,H,W] using only occupied voxels; all-empty columns give zero.
template <typename T> Tensor<T> masked_mean_over_depth(const Tensor<T>& v, const Mask& occupancy);

/// Set reductions over row groups of x[N, D]. offsets has S+1 entries; set s
/// owns rows [offsets[s], offsets[s+1]). Sets must be nonempty.
template <typename T> Tensor<T> set_mean_rows(const Tensor<T>& x, const std::vector<int>& offsets);
template <typename T> Tensor<T> set_max_rows(const Tensor<T>& x, const std::vector<int>& offsets);
/// Inverse of a set reduction: repeats row s of x[S, D] for every member of set s.
template <typename T> Tensor<T> broadcast_rows(const Tensor<T>& x, const std::vector<int>& offsets);

}  // namespace aop::ops
