#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "aop/layers.hpp"
#include "aop/tensor_io.hpp"

namespace aop {

/// Metric extent and resolution of the voxel grid. BEV cells are indexed
/// (row, col) with row along y and col along x.
struct GridSpec {
  double x_min = -25.6, x_max = 25.6;
  double y_min = -25.6, y_max = 25.6;
  double z_min = -3.0, z_max = 3.0;
  int H = 128, W = 128, Z = 16;

  double vx() const { return (x_max - x_min) / W; }
  double vy() const { return (y_max - y_min) / H; }
  double vz() const { return (z_max - z_min) / Z; }
  /// Throws ConfigError unless ranges are nonempty and H, W, Z are powers of two >= 8.
  void validate() const;
  /// Full-resolution voxel coordinates (z, row, col), or false when outside the grid.
  bool locate(const Point& p, int& iz, int& row, int& col) const;
};

/// Range-view raster: azimuth across columns, inclination down rows.
struct RVSpec {
  int height = 32;
  int width = 256;
  double fov_up_deg = 3.0;
  double fov_down_deg = -25.0;
};

/// Hand-crafted per-voxel statistics before the learned embedding.
struct RawVoxels {
  GridSpec grid;
  std::vector<int> occupied;       ///< flat voxel indices (z, row, col order), ascending
  std::vector<float> features;     ///< occupied.size() x kRawVoxelFeatures, row-major
  ops::Mask occupancy;             ///< Z*H*W
  std::vector<int> point_voxel;    ///< per point: flat voxel index or -1
};
inline constexpr int kRawVoxelFeatures = 5;

/// Means of (x, y, z) offsets from the voxel center in voxel units, mean
/// intensity and log(1 + count) for each occupied voxel. Points outside
/// the grid are dropped.
RawVoxels voxelize_raw(const PointCloud& pc, const GridSpec& grid);

template <typename T>
struct VoxelFeatureVolume {
  Tensor<T> features;  ///< [C, D, H, W]; unoccupied voxels are zero
  ops::Mask occupancy; ///< D*H*W
};

/// Applies the shared embedding (5 -> C0) to occupied voxels.
template <typename T>
VoxelFeatureVolume<T> embed_voxels(const RawVoxels& raw, const Linear<T>& embed);

/// Per-column mean over occupied voxels: [C, D, H, W] -> [C, H, W].
template <typename T>
Tensor<T> average_over_height(const VoxelFeatureVolume<T>& v);

/// Folds depth into channels: [C, D, H, W] -> [C*D, H, W] (channel c*D + d).
template <typename T>
Tensor<T> bev_collapse(const VoxelFeatureVolume<T>& v);

struct RVImage {
  int height = 0, width = 0;
  Tensor<float> features;          ///< [5, h, w]: x, y, z, range, intensity
  std::vector<int> index;          ///< h*w point indices, -1 when empty
  std::vector<int> point_pixel;    ///< per point: pixel it projects to, -1 for the origin
};

RVImage project_rv(const PointCloud& pc, const RVSpec& spec);

/// Index map at 1/factor resolution: each coarse pixel keeps the nearest
/// point among its factor x factor children.
std::vector<int> downsample_rv_index(const std::vector<int>& index, int height, int width, int factor,
                                     const PointCloud& pc);

/// True when a is nearer the sensor than b; exact range ties fall back to a
/// lexicographic comparison of the point values.
bool nearer(const Point& a, const Point& b);

/// For each RV pixel, the flat index of the voxel containing its point in a
/// volume downsampled by `stride` (z, row, col); -1 for empty pixels and
/// out-of-range points.
std::vector<int> rv_voxel_index(const std::vector<int>& rv_index, const std::vector<int>& point_voxel,
                                const GridSpec& grid, std::array<int, 3> stride);

/// Gathers voxel features for every RV pixel and compresses channels with a
/// bias-free 1x1 conv. v is [C, D, H, W]; result [C', h, w].
template <typename T>
Tensor<T> voxel_to_rv(const Tensor<T>& v, const std::vector<int>& voxel_index, int h, int w,
                      const Conv2d<T>& compress);

/// Per-scale BEV grid of dense instance IDs; registry[k-1] is the source ID of dense ID k.
struct InstanceMask {
  int height = 0, width = 0;
  std::vector<int> cells;
  std::vector<std::uint32_t> registry;
  int count() const { return static_cast<int>(registry.size()); }
  int at(int r, int c) const { return cells[static_cast<std::size_t>(r) * width + c]; }
};

/// Majority vote over the nonzero instance IDs of the points in each cell at
/// BEV downsample `factor`; ties go to the smaller ID. Dense IDs follow
/// ascending source ID.
InstanceMask rasterize_instances(const PointCloud& pc, const std::vector<std::uint32_t>& ids, const GridSpec& grid,
                                 int factor);

}  // namespace aop
