#pragma once

#include <array>
#include <string>

#include "aop/geometry.hpp"

namespace aop {

template <typename T>
struct ScalePyramid {
  VoxelFeatureVolume<T> s1;  ///< [c1, Z/2, H/2, W/2]
  VoxelFeatureVolume<T> s2;  ///< [c1, Z/4, H/4, W/4]
  VoxelFeatureVolume<T> s3;  ///< [c2, Z/16, H/8, W/8]
};

inline constexpr std::array<int, 3> kStrideS1{2, 2, 2};
inline constexpr std::array<int, 3> kStrideS2{4, 4, 4};
inline constexpr std::array<int, 3> kStrideS3{16, 8, 8};

/// Occupancy after a 3x3x3 / padding 1 convolution with the given stride: an
/// output voxel is active when any input voxel in its window is active.
ops::Mask strided_occupancy(const ops::Mask& in, int d, int h, int w, std::array<int, 3> stride);

/// conv3d (computed on active outputs only) + masked batch norm + ReLU, with
/// an identity residual when stride is 1 and widths match.
template <typename T>
struct SparseBlock3d {
  Conv3d<T> conv;
  BatchNorm<T> bn;
  bool residual = false;
  SparseBlock3d() = default;
  SparseBlock3d(ParamStore<T>& ps, const std::string& name, int in, int out, std::array<int, 3> stride);
  VoxelFeatureVolume<T> operator()(const VoxelFeatureVolume<T>& x, bool training);
};

/// Strided 3D pyramid shared by detection and panoptic branches.
template <typename T>
class Backbone3d {
 public:
  Backbone3d() = default;
  Backbone3d(ParamStore<T>& ps, const std::string& name, int c0, int c1, int c2);
  /// Throws ConfigError when the grid cannot take four height downsamples.
  ScalePyramid<T> operator()(const VoxelFeatureVolume<T>& v, bool training);

 private:
  std::array<SparseBlock3d<T>, 6> blocks_;
};

/// Fuses an RV feature map with projected voxel features: concatenation,
/// 1x1 conv back to C, channel attention, then spatial attention.
template <typename T>
struct Cbam {
  Conv2d<T> fuse;
  Linear<T> mlp1, mlp2;
  Conv2d<T> spatial;
  Cbam() = default;
  Cbam(ParamStore<T>& ps, const std::string& name, int channels, int reduction = 4, int spatial_kernel = 7);

  struct Gates {
    Tensor<T> channel;  ///< [C]
    Tensor<T> spatial;  ///< [1, h, w]
  };
  Tensor<T> operator()(const Tensor<T>& rv_feat, const Tensor<T>& voxel_rv_feat, Gates* gates = nullptr) const;
};

}  // namespace aop
