#include "aop/backbone3d.hpp"

#include <algorithm>

namespace aop {

ops::Mask strided_occupancy(const ops::Mask& in, int d, int h, int w, std::array<int, 3> stride) {
  const int od = (d - 1) / stride[0] + 1, oh = (h - 1) / stride[1] + 1, ow = (w - 1) / stride[2] + 1;
  ops::Mask out(static_cast<std::size_t>(od) * oh * ow, 0);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!in[(static_cast<std::size_t>(z) * h + y) * w + x]) continue;
        // Outputs o with o*s - 1 <= i <= o*s + 1.
        for (int oz = std::max(0, (z - 1 + stride[0] - 1) / stride[0]); oz <= std::min(od - 1, (z + 1) / stride[0]); ++oz)
          for (int oy = std::max(0, (y - 1 + stride[1] - 1) / stride[1]); oy <= std::min(oh - 1, (y + 1) / stride[1]);
               ++oy)
            for (int ox = std::max(0, (x - 1 + stride[2] - 1) / stride[2]);
                 ox <= std::min(ow - 1, (x + 1) / stride[2]); ++ox)
              out[(static_cast<std::size_t>(oz) * oh + oy) * ow + ox] = 1;
      }
  return out;
}

template <typename T>
SparseBlock3d<T>::SparseBlock3d(ParamStore<T>& ps, const std::string& name, int in, int out,
                                std::array<int, 3> stride) {
  typename ParamStore<T>::Scope scope(ps, name);
  conv = Conv3d<T>(ps, "conv", in, out, stride, false);
  bn = BatchNorm<T>(ps, "bn", out);
  residual = in == out && stride == std::array<int, 3>{1, 1, 1};
}

template <typename T>
VoxelFeatureVolume<T> SparseBlock3d<T>::operator()(const VoxelFeatureVolume<T>& x, bool training) {
  const auto& s = x.features.shape();
  VoxelFeatureVolume<T> out;
  if (conv.stride == std::array<int, 3>{1, 1, 1}) {
    out.occupancy = x.occupancy;
  } else {
    out.occupancy = strided_occupancy(x.occupancy, s[1], s[2], s[3], conv.stride);
  }
  auto y = bn(conv(x.features, &out.occupancy), training, &out.occupancy);
  if (residual) y = ops::add(y, x.features);
  out.features = ops::relu(y);
  return out;
}

template <typename T>
Backbone3d<T>::Backbone3d(ParamStore<T>& ps, const std::string& name, int c0, int c1, int c2) {
  typename ParamStore<T>::Scope scope(ps, name);
  blocks_[0] = SparseBlock3d<T>(ps, "a0", c0, c1, {1, 1, 1});
  blocks_[1] = SparseBlock3d<T>(ps, "a1", c1, c1, {2, 2, 2});
  blocks_[2] = SparseBlock3d<T>(ps, "b0", c1, c1, {2, 2, 2});
  blocks_[3] = SparseBlock3d<T>(ps, "b1", c1, c1, {1, 1, 1});
  blocks_[4] = SparseBlock3d<T>(ps, "c0", c1, c2, {2, 2, 2});
  blocks_[5] = SparseBlock3d<T>(ps, "c1", c2, c2, {2, 1, 1});
}

template <typename T>
ScalePyramid<T> Backbone3d<T>::operator()(const VoxelFeatureVolume<T>& v, bool training) {
  const auto& s = v.features.shape();
  if (s.size() != 4) throw DimensionError("backbone3d: expected [C, Z, H, W]");
  if (s[1] < 16 || s[1] % 16 != 0 || s[2] % 8 != 0 || s[3] % 8 != 0) {
    throw ConfigError("backbone3d: grid too small for four downsamples (need Z % 16 == 0, H, W % 8 == 0)");
  }
  ScalePyramid<T> p;
  p.s1 = blocks_[1](blocks_[0](v, training), training);
  p.s2 = blocks_[3](blocks_[2](p.s1, training), training);
  p.s3 = blocks_[5](blocks_[4](p.s2, training), training);
  return p;
}

template <typename T>
Cbam<T>::Cbam(ParamStore<T>& ps, const std::string& name, int channels, int reduction, int spatial_kernel) {
  typename ParamStore<T>::Scope scope(ps, name);
  const int hidden = std::max(1, channels / reduction);
  fuse = Conv2d<T>(ps, "fuse", 2 * channels, channels, 1);
  mlp1 = Linear<T>(ps, "mlp1", channels, hidden);
  mlp2 = Linear<T>(ps, "mlp2", hidden, channels);
  spatial = Conv2d<T>(ps, "spatial", 2, 1, spatial_kernel);
}

template <typename T>
Tensor<T> Cbam<T>::operator()(const Tensor<T>& rv_feat, const Tensor<T>& voxel_rv_feat, Gates* gates) const {
  if (rv_feat.shape() != voxel_rv_feat.shape()) {
    throw DimensionError("cbam: " + shape_str(rv_feat.shape()) + " vs " + shape_str(voxel_rv_feat.shape()));
  }
  auto x = fuse(ops::concat<T>({rv_feat, voxel_rv_feat}, 0));
  auto mlp = [this](const Tensor<T>& d) { return mlp2(ops::relu(mlp1(d))); };
  auto channel_gate = ops::sigmoid(ops::add(mlp(ops::global_avg_pool(x)), mlp(ops::global_max_pool(x))));
  auto xc = ops::mul_channel(x, channel_gate);
  auto desc = ops::concat<T>({ops::channel_mean(xc), ops::channel_max(xc)}, 0);
  auto spatial_gate = ops::sigmoid(spatial(desc));
  if (gates) {
    gates->channel = channel_gate;
    gates->spatial = spatial_gate;
  }
  return ops::mul_spatial(xc, spatial_gate);
}

template struct SparseBlock3d<float>;
template struct SparseBlock3d<double>;
template class Backbone3d<float>;
template class Backbone3d<double>;
template struct Cbam<float>;
template struct Cbam<double>;

}  // namespace aop
