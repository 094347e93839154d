#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aop/ops.hpp"
#include "aop/rng.hpp"

namespace aop {

enum class ParamKind { Weight, Buffer, State };

const char* param_kind_name(ParamKind kind);

/// Named parameter registry shared by every layer of a model. Names are
/// built from a stack of scopes ("backbone3d.stage_a.conv0.weight") and must
/// be unique. Initial values are drawn from the store's own generator in
/// registration order, so construction order fixes the initialization.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamKind kind;
    Tensor<T> tensor;
  };

  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<T> add(const std::string& local_name, Tensor<T> value, ParamKind kind = ParamKind::Weight);
  /// Uniform(-bound, bound) weight.
  Tensor<T> add_uniform(const std::string& local_name, Shape shape, double bound);

  bool contains(const std::string& name) const;
  Tensor<T> get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor<T>> weights() const;

  void zero_grad();
  /// Total number of scalar values in Weight entries.
  std::size_t weight_count() const;
  /// One line per entry: "name kind d0xd1x...". State entries are omitted
  /// unless include_state is set.
  std::string manifest(bool include_state = false) const;

  Rng& rng() { return rng_; }

  class Scope {
   public:
    Scope(ParamStore& store, const std::string& name) : store_(store) { store_.scopes_.push_back(name); }
    ~Scope() { store_.scopes_.pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ParamStore& store_;
  };

  std::string qualified(const std::string& local_name) const;

 private:
  std::vector<Entry> entries_;
  std::vector<std::string> scopes_;
  Rng rng_;
};

/// Copies every entry of `src` into the same-named entry of `dst`, casting
/// element type. Throws ContractError on a name or shape mismatch.
template <typename Src, typename Dst>
void copy_params(const ParamStore<Src>& src, ParamStore<Dst>& dst);

template <typename T>
struct Linear {
  Tensor<T> weight, bias;
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, bool with_bias = true, double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight, bias;
  int stride = 1;
  int padding = 0;
  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int in, int out, int kernel, int stride = 1,
         bool with_bias = true, double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, {stride, padding}); }
};

template <typename T>
struct DepthwiseConv2d {
  Tensor<T> weight, bias;
  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParamStore<T>& ps, const std::string& name, int channels, int kernel, double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::depthwise_conv2d(x, weight, bias); }
};

template <typename T>
struct Conv3d {
  Tensor<T> weight, bias;
  std::array<int, 3> stride{1, 1, 1};
  Conv3d() = default;
  Conv3d(ParamStore<T>& ps, const std::string& name, int in, int out, std::array<int, 3> stride,
         bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x, const ops::Mask* out_mask = nullptr) const {
    return ops::conv3d(x, weight, bias, {stride, {1, 1, 1}, out_mask});
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;
  BatchNorm() = default;
  BatchNorm(ParamStore<T>& ps, const std::string& name, int channels);
  /// Channel-first input [C, ...].
  Tensor<T> operator()(const Tensor<T>& x, bool training, const ops::Mask* mask = nullptr);
  /// Row input [N, C].
  Tensor<T> rows(const Tensor<T>& x, bool training);
};

/// 3x3 conv (no bias) + batch norm + ReLU.
template <typename T>
struct ConvBlock2d {
  Conv2d<T> conv;
  BatchNorm<T> bn;
  ConvBlock2d() = default;
  ConvBlock2d(ParamStore<T>& ps, const std::string& name, int in, int out, int stride = 1);
  Tensor<T> operator()(const Tensor<T>& x, bool training);
};

}  // namespace aop
