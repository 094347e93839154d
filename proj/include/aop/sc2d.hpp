#pragma once

#include <string>
#include <vector>

#include "aop/layers.hpp"

namespace aop {

struct ScBlockSpec {
  int channels = 0;
  int ratio = 2;
  int kernel = 3;
};

/// y1 = x + fc2(gelu(fc1(x))), y = y1 + dw(y1), with fc1/fc2 1x1 convs
/// (C -> rC -> C) and dw a k x k depthwise conv.
template <typename T>
struct ScBlock {
  Conv2d<T> fc1, fc2;
  DepthwiseConv2d<T> dw;
  int channels = 0;
  ScBlock() = default;
  /// zero_init_residual zeroes fc2 and dw so the block starts as the identity.
  ScBlock(ParamStore<T>& ps, const std::string& name, ScBlockSpec spec, bool zero_init_residual = false);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

struct ScBackboneConfig {
  int in_channels = 0;
  int width1 = 64;
  int width2 = 64;
  int n0 = 2;
  int n1 = 5;
  int n2 = 10;
  int ratio = 2;
  /// false swaps every SC block for a 3x3 Conv block (ablation).
  bool use_sc = true;
  bool zero_init_residual = false;
  int out_channels() const { return width1 + width2; }
};

/// n0 Conv blocks, set 1 of n1 SC blocks, stride-2 Conv block, set 2 of n2
/// SC blocks, nearest x2 upsampling of set 2 and concatenation with set 1.
template <typename T>
class ScBackbone {
 public:
  ScBackbone() = default;
  ScBackbone(ParamStore<T>& ps, const std::string& name, const ScBackboneConfig& cfg);
  Tensor<T> operator()(const Tensor<T>& x, bool training);

 private:
  ScBackboneConfig cfg_;
  std::vector<ConvBlock2d<T>> stem_;
  std::vector<ScBlock<T>> set1_, set2_;
  std::vector<ConvBlock2d<T>> set1_conv_, set2_conv_;
  ConvBlock2d<T> down_;
};

/// One layer for the analytic cost model. Kinds: "conv3x3" (biased conv),
/// "conv_block" (bias-free conv3x3 + batch norm), "sc_block" and
/// "convmlp_block" (original block: MLP, depthwise conv, MLP).
struct LayerDesc {
  std::string kind;
  int in_channels = 0;
  int out_channels = 0;
  int ratio = 2;
  int kernel = 3;
  std::string label;
};

struct CostReport {
  std::string layer;
  long params = 0;
  long macs_per_pos = 0;
  /// Output activation values per spatial position, summed over sub-layers.
  long activations_per_pos = 0;
};

/// Throws ContractError for an unknown kind.
CostReport count_cost(const LayerDesc& layer);
/// Same-width shorthand.
CostReport count_cost(const std::string& kind, int channels, int ratio = 2);
/// Layer list of an ScBackbone in construction order; summing count_cost
/// over it gives the backbone's parameter count exactly.
std::vector<LayerDesc> describe_backbone(const ScBackboneConfig& cfg);

/// Relative reduction 1 - a/b in percent.
double reduction_percent(double a, double b);

}  // namespace aop
