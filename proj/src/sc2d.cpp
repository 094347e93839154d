#include "aop/sc2d.hpp"

namespace aop {

template <typename T>
ScBlock<T>::ScBlock(ParamStore<T>& ps, const std::string& name, ScBlockSpec spec, bool zero_init_residual)
    : channels(spec.channels) {
  if (spec.ratio < 1 || spec.kernel % 2 == 0) throw ConfigError("sc block: ratio >= 1 and odd kernel required");
  typename ParamStore<T>::Scope scope(ps, name);
  const double out_scale = zero_init_residual ? 0.0 : 1.0;
  fc1 = Conv2d<T>(ps, "fc1", spec.channels, spec.ratio * spec.channels, 1);
  fc2 = Conv2d<T>(ps, "fc2", spec.ratio * spec.channels, spec.channels, 1, 1, true, out_scale);
  dw = DepthwiseConv2d<T>(ps, "dw", spec.channels, spec.kernel, out_scale);
}

template <typename T>
Tensor<T> ScBlock<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(0) != channels) {
    throw DimensionError("sc block: expected " + std::to_string(channels) + " channels, got " + shape_str(x.shape()));
  }
  auto y1 = ops::add(x, fc2(ops::gelu(fc1(x))));
  return ops::add(y1, dw(y1));
}

template <typename T>
ScBackbone<T>::ScBackbone(ParamStore<T>& ps, const std::string& name, const ScBackboneConfig& cfg) : cfg_(cfg) {
  if (cfg.n0 < 1) throw ConfigError("sc backbone needs at least one Conv block");
  typename ParamStore<T>::Scope scope(ps, name);
  for (int i = 0; i < cfg.n0; ++i) {
    stem_.emplace_back(ps, "stem" + std::to_string(i), i == 0 ? cfg.in_channels : cfg.width1, cfg.width1);
  }
  auto make_set = [&](const std::string& set, int n, int width, std::vector<ScBlock<T>>& sc,
                      std::vector<ConvBlock2d<T>>& conv) {
    typename ParamStore<T>::Scope s(ps, set);
    for (int i = 0; i < n; ++i) {
      const std::string block = "block" + std::to_string(i);
      if (cfg.use_sc) {
        sc.emplace_back(ps, block, ScBlockSpec{width, cfg.ratio, 3}, cfg.zero_init_residual);
      } else {
        conv.emplace_back(ps, block, width, width);
      }
    }
  };
  make_set("set1", cfg.n1, cfg.width1, set1_, set1_conv_);
  down_ = ConvBlock2d<T>(ps, "down", cfg.width1, cfg.width2, 2);
  make_set("set2", cfg.n2, cfg.width2, set2_, set2_conv_);
}

template <typename T>
Tensor<T> ScBackbone<T>::operator()(const Tensor<T>& x, bool training) {
  if (x.rank() != 3 || x.dim(0) != cfg_.in_channels) {
    throw DimensionError("sc backbone: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                         shape_str(x.shape()));
  }
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) throw ConfigError("sc backbone: odd spatial extent before downsample");
  Tensor<T> h = x;
  for (auto& b : stem_) h = b(h, training);
  for (auto& b : set1_) h = b(h);
  for (auto& b : set1_conv_) h = b(h, training);
  Tensor<T> s1 = h;
  h = down_(s1, training);
  for (auto& b : set2_) h = b(h);
  for (auto& b : set2_conv_) h = b(h, training);
  return ops::concat<T>({s1, ops::upsample_nearest(h, 2)}, 0);
}

CostReport count_cost(const LayerDesc& l) {
  const long ci = l.in_channels, co = l.out_channels, r = l.ratio, k2 = static_cast<long>(l.kernel) * l.kernel;
  CostReport c;
  c.layer = l.label.empty() ? l.kind + "_c" + std::to_string(l.out_channels) : l.label;
  if (l.kind == "conv3x3") {
    c.params = 9 * ci * co + co;
    c.macs_per_pos = 9 * ci * co;
    c.activations_per_pos = co;
  } else if (l.kind == "conv_block") {
    c.params = 9 * ci * co + 2 * co;
    c.macs_per_pos = 9 * ci * co;
    c.activations_per_pos = 2 * co;
  } else if (l.kind == "sc_block" || l.kind == "convmlp_block") {
    if (ci != co) throw ContractError(l.kind + " keeps its width");
    const long mlp_params = (r * ci * ci + r * ci) + (r * ci * ci + ci);
    const long mlp_macs = 2 * r * ci * ci;
    const int mlps = l.kind == "sc_block" ? 1 : 2;
    c.params = mlps * mlp_params + (k2 * ci + ci);
    c.macs_per_pos = mlps * mlp_macs + k2 * ci;
    c.activations_per_pos = mlps * (r * ci + ci) + ci;
  } else {
    throw ContractError("count_cost: unknown layer kind '" + l.kind + "'");
  }
  return c;
}

CostReport count_cost(const std::string& kind, int channels, int ratio) {
  LayerDesc l;
  l.kind = kind;
  l.in_channels = channels;
  l.out_channels = channels;
  l.ratio = ratio;
  return count_cost(l);
}

std::vector<LayerDesc> describe_backbone(const ScBackboneConfig& cfg) {
  std::vector<LayerDesc> out;
  auto add = [&](std::string kind, int in, int o, std::string label) {
    out.push_back({std::move(kind), in, o, cfg.ratio, 3, std::move(label)});
  };
  for (int i = 0; i < cfg.n0; ++i) add("conv_block", i == 0 ? cfg.in_channels : cfg.width1, cfg.width1, "stem" + std::to_string(i));
  const std::string block_kind = cfg.use_sc ? "sc_block" : "conv_block";
  for (int i = 0; i < cfg.n1; ++i) add(block_kind, cfg.width1, cfg.width1, "set1.block" + std::to_string(i));
  add("conv_block", cfg.width1, cfg.width2, "down");
  for (int i = 0; i < cfg.n2; ++i) add(block_kind, cfg.width2, cfg.width2, "set2.block" + std::to_string(i));
  return out;
}

double reduction_percent(double a, double b) { return 100.0 * (1.0 - a / b); }

template struct ScBlock<float>;
template struct ScBlock<double>;
template class ScBackbone<float>;
template class ScBackbone<double>;

}  // namespace aop
