#pragma once

#include <string>
#include <vector>

#include "aop/backbone3d.hpp"
#include "aop/geometry.hpp"

namespace aop {

/// Semantic label layout shared by the panoptic head and the metrics.
struct ClassSet {
  int num_classes = 5;
  std::vector<bool> is_thing{false, false, true, true, true};
  int void_class = -1;  ///< label ignored by the metrics; -1 for none
  bool thing(int c) const { return c >= 0 && c < num_classes && is_thing[c]; }
  int num_things() const;
  /// Index of thing class c among thing classes (detection class), or -1.
  int thing_index(int c) const;
};

struct PanopticHeadConfig {
  int in_channels = 5;
  std::array<int, 3> widths{16, 32, 32};
  int num_classes = 5;
  /// Voxel pyramid widths for the three fusion points (s1, s2, s3).
  std::array<int, 3> voxel_channels{32, 32, 64};
  /// false removes the RV fusion with the 3D pyramid (ablation).
  bool dual_task = true;
};

/// Per-scale RV index data needed to fuse voxel features into the encoder.
struct RVFusionIndex {
  std::array<std::vector<int>, 3> voxel_index;  ///< per encoder stage, per pixel
  std::array<int, 3> height{}, width{};
};

RVFusionIndex build_fusion_index(const RVImage& rv, const PointCloud& pc, const RawVoxels& raw);

template <typename T>
struct PanopticOutput {
  Tensor<T> logits;   ///< [Ncls, h, w]
  Tensor<T> offsets;  ///< [2, h, w], BEV metres from point to its instance center
};

/// RV U-Net: three encoder stages (full, /2, /4) fused with s1, s2, s3
/// through CBAM, and separate semantic and offset decoders.
template <typename T>
class PanopticHead {
 public:
  PanopticHead() = default;
  PanopticHead(ParamStore<T>& ps, const std::string& name, const PanopticHeadConfig& cfg);
  PanopticOutput<T> operator()(const Tensor<T>& rv_features, const ScalePyramid<T>* pyramid,
                               const RVFusionIndex* index, bool training);
  const PanopticHeadConfig& config() const { return cfg_; }

 private:
  struct Decoder {
    ConvBlock2d<T> up2, up1;
    Conv2d<T> out;
  };
  Tensor<T> decode(Decoder& d, const Tensor<T>& e1, const Tensor<T>& e2, const Tensor<T>& e3, bool training);

  PanopticHeadConfig cfg_;
  ConvBlock2d<T> stem_, down1_, down2_;
  std::array<Conv2d<T>, 3> compress_;
  std::array<Cbam<T>, 3> cbam_;
  Decoder sem_, off_;
};

struct PanopticTargets {
  std::vector<int> labels;   ///< per RV pixel, -1 when empty or void
  Tensor<float> offsets;     ///< [2, h, w]
  ops::Mask foreground;      ///< per RV pixel: thing point
};

/// Rasterizes point labels into the RV image through its index map. Offset
/// targets point from each thing point to the BEV mean of its instance.
PanopticTargets make_panoptic_targets(const RVImage& rv, const PointCloud& pc, const std::vector<PointLabel>& labels,
                                      const ClassSet& classes);

/// w_ce * cross-entropy over labelled pixels + w_off * L2 offset loss over
/// foreground pixels. Sets *empty when no pixel carries a label.
template <typename T>
Tensor<T> panoptic_loss(const PanopticOutput<T>& out, const PanopticTargets& targets, double w_ce, double w_off,
                        const std::vector<double>& class_weights = {}, bool* empty = nullptr);

struct ClusterConfig {
  double pillar_size = 0.5;
  int min_points = 5;
};

/// Per-point semantic class from the argmax of the logits at each point's pixel.
std::vector<int> point_semantics(const Tensor<float>& logits, const RVImage& rv, std::size_t num_points);

/// Shifts thing points by their predicted BEV offsets, bins them into
/// pillars and labels 4-connected pillar components in row-major scan
/// order. Components with fewer than min_points points are dropped.
std::vector<std::uint32_t> cluster_instances(const Tensor<float>& offsets, const std::vector<int>& semantics,
                                             const PointCloud& pc, const RVImage& rv, const ClassSet& classes,
                                             const ClusterConfig& cfg);

/// Overwrites each instance's point classes with its majority thing class
/// (ties to the smaller class).
void harmonize_instance_classes(std::vector<int>& semantics, const std::vector<std::uint32_t>& instances,
                                const ClassSet& classes);

}  // namespace aop
