#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "aop/backbone3d.hpp"
#include "aop/config.hpp"
#include "aop/detect.hpp"
#include "aop/ifr.hpp"
#include "aop/metrics.hpp"
#include "aop/panoptic.hpp"
#include "aop/sc2d.hpp"

namespace aop {

inline constexpr int kDetectFactor = 8;
inline constexpr std::array<int, 3> kMaskFactors{2, 4, 8};

/// A scene with every weight-independent preprocessing step done once.
struct SceneInput {
  PointCloud points;
  RawVoxels raw;
  RVImage rv;
  RVFusionIndex fusion;
  bool has_labels = false;
  std::vector<PointLabel> labels;
  std::vector<Box3D> boxes;
  PanopticTargets panoptic_targets;
  DetectionTargets detection_targets;
  std::array<InstanceMask, 3> gt_masks;  ///< BEV factors 2, 4, 8
};

SceneInput prepare_scene(const PointCloud& points, const RunConfig& cfg, const std::vector<PointLabel>* labels = nullptr,
                         const std::vector<Box3D>* boxes = nullptr);

std::array<InstanceMask, 3> rasterize_masks(const PointCloud& pc, const std::vector<std::uint32_t>& ids,
                                            const GridSpec& grid);

enum class MaskSource { GroundTruth, Predicted };

template <typename T>
struct PipelineOutput {
  PanopticOutput<T> panoptic;
  HeadOutput<T> detection;
  Tensor<float> fg_scores;               ///< [Nfg, H/8, W/8]
  std::optional<IfrOutput<T>> ifr;
  PanopticLabels predicted;              ///< filled when masks come from the prediction
  std::array<InstanceMask, 3> masks;     ///< masks handed to IFR
};

/// The full network: voxel embedding, 3D pyramid, RV panoptic head, 2D
/// detection backbone, foreground fusion, IFR and the center head.
template <typename T>
class Pipeline {
 public:
  Pipeline(ParamStore<T>& ps, const RunConfig& cfg);
  PipelineOutput<T> forward(const SceneInput& scene, MaskSource masks, bool training);
  int detection_channels() const { return det_in_; }

 private:
  RunConfig cfg_;
  ClassSet classes_;
  Linear<T> embed_;
  Backbone3d<T> backbone_;
  PanopticHead<T> panoptic_;
  ScBackbone<T> sc_;
  FusionAttention<T> fusion_;
  std::optional<Ifr<T>> ifr_;
  DetectHead<T> head_;
  int det_in_ = 0;
};

struct LossBreakdown {
  double total = 0, detection = 0, panoptic = 0;
};

template <typename T>
Tensor<T> joint_loss(const PipelineOutput<T>& out, const SceneInput& scene, const RunConfig& cfg,
                     LossBreakdown* parts = nullptr);

/// Per-point semantic classes and instance IDs from the panoptic output.
PanopticLabels postprocess_panoptic(const PanopticOutput<float>& out, const SceneInput& scene, const RunConfig& cfg);

struct Prediction {
  PanopticLabels panoptic;
  std::vector<Box3D> boxes;
  PipelineOutput<float> raw;
};

Prediction predict(Pipeline<float>& model, const SceneInput& scene, const RunConfig& cfg);

}  // namespace aop
