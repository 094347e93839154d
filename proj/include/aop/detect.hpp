#pragma once

#include <string>
#include <vector>

#include "aop/geometry.hpp"
#include "aop/panoptic.hpp"

namespace aop {

struct Box3D {
  double x = 0, y = 0, z = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;
  int cls = 0;
  double score = 1.0;
};

inline constexpr int kRegressionChannels = 8;  // off_x, off_y, z, log l, log w, log h, sin, cos

/// Wraps an angle into [-pi, pi).
double normalize_yaw(double yaw);

/// Foreground evidence from the panoptic branch: per-point softmax over the
/// semantic logits, thing-class probabilities max-scattered to the coarse
/// BEV grid (BEV downsample `factor`). Cells without points are zero.
Tensor<float> foreground_scores(const Tensor<float>& logits, const RVImage& rv, const PointCloud& pc,
                                const GridSpec& grid, const ClassSet& classes, int factor);

/// out = bev * (1 + sigmoid(conv1x1(S))) concatenated with S.
template <typename T>
struct FusionAttention {
  Conv2d<T> gate;
  FusionAttention() = default;
  FusionAttention(ParamStore<T>& ps, const std::string& name, int bev_channels, int fg_channels);
  Tensor<T> operator()(const Tensor<T>& bev, const Tensor<T>& scores) const;
};

template <typename T>
struct HeadOutput {
  Tensor<T> heatmap;     ///< [Ncls, h, w], sigmoid probabilities
  Tensor<T> regression;  ///< [8, h, w]
};

template <typename T>
class DetectHead {
 public:
  DetectHead() = default;
  DetectHead(ParamStore<T>& ps, const std::string& name, int in_channels, int trunk_channels, int num_classes);
  HeadOutput<T> operator()(const Tensor<T>& features, bool training);

 private:
  ConvBlock2d<T> trunk_;
  Conv2d<T> heat_, reg_;
};

struct DetectionTargets {
  Tensor<float> heatmap;     ///< [Ncls, h, w]
  Tensor<float> regression;  ///< [8, h, w]
  Tensor<float> weight;      ///< [8, h, w], 1 at box center cells
  int skipped = 0;           ///< boxes whose center lies outside the grid
};

/// Gaussian radius for a box footprint of (l, w) cells at the given minimum
/// overlap (CenterNet/CenterPoint rule), floored and clamped to >= min_radius.
int gaussian_radius(double l_cells, double w_cells, double min_overlap = 0.1, int min_radius = 1);

DetectionTargets make_targets(const std::vector<Box3D>& boxes, const GridSpec& grid, int factor, int num_classes);

/// Peaks are cells at least as high as their 8 neighbours, strictly higher
/// than the neighbours that precede them in raster order, and above
/// score_thresh. The best max_dets peaks over all classes are decoded.
std::vector<Box3D> decode_boxes(const Tensor<float>& heatmap, const Tensor<float>& regression, const GridSpec& grid,
                                int factor, double score_thresh, int max_dets);

template <typename T>
Tensor<T> detection_loss(const HeadOutput<T>& out, const DetectionTargets& targets, double w_heatmap,
                         double w_regression);

}  // namespace aop
