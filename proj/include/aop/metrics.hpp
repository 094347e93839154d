#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "aop/detect.hpp"
#include "aop/panoptic.hpp"

namespace aop {

/// Per-point panoptic labelling. Instance 0 means "no instance"; thing
/// points with instance 0 belong to no segment.
struct PanopticLabels {
  std::vector<int> semantic;
  std::vector<std::uint32_t> instance;
};

struct ClassQuality {
  double pq = 0, rq = 0, sq = 0, iou = 0;  ///< percentages
  double iou_sum = 0;                       ///< sum of matched segment IoUs (fractions)
  int tp = 0, fp = 0, fn = 0;
  bool present = false;  ///< has any segment in prediction or ground truth
};

struct PanopticScore {
  std::vector<ClassQuality> per_class;
  double pq = 0, rq = 0, sq = 0;
  double pq_th = 0, pq_st = 0;
  double miou = 0;
};

/// Dataset-level PQ: TP/FP/FN and IoU sums are pooled over scenes before
/// the per-class ratios are taken.
class PanopticAccumulator {
 public:
  explicit PanopticAccumulator(ClassSet classes);
  void add(const PanopticLabels& pred, const PanopticLabels& gt);
  PanopticScore score() const;

 private:
  ClassSet classes_;
  std::vector<double> iou_sum_;
  std::vector<int> tp_, fp_, fn_;
  std::vector<std::int64_t> confusion_;  ///< [gt][pred]
};

PanopticScore panoptic_quality(const PanopticLabels& pred, const PanopticLabels& gt, const ClassSet& classes);

struct DetectionScene {
  std::vector<Box3D> detections;
  std::vector<Box3D> ground_truth;
};

struct DetectionScore {
  std::vector<double> thresholds;
  std::vector<std::vector<double>> ap;  ///< [class][threshold]
  std::vector<bool> class_present;      ///< class has ground truth
  double map = 0;
  std::vector<double> ate, ase, aoe;  ///< per class over TPs at the 2 m threshold; 1 when a class has no TP
  /// Means over classes with ground truth.
  double mate = 1, mase = 1, maoe = 1;
};

inline constexpr double kApMinRecall = 0.1;
inline constexpr double kApMinPrecision = 0.1;
inline constexpr double kTpErrorThreshold = 2.0;

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched ground-truth box of its class in the same scene when
/// the BEV center distance is below the threshold. Returns per-detection
/// matched GT index (or -1) in the order of `order`.
std::vector<int> greedy_match(const std::vector<DetectionScene>& scenes, int cls, double threshold,
                              std::vector<std::pair<int, int>>* order = nullptr);

/// Area under the 101-point interpolated precision curve above the recall
/// floor, with the minimum precision subtracted and renormalized.
double interpolated_ap(const std::vector<double>& precision, const std::vector<double>& recall);

DetectionScore average_precision(const std::vector<DetectionScene>& scenes, int num_classes,
                                 const std::vector<double>& thresholds = {0.5, 1.0, 2.0, 4.0});

double bev_center_distance(const Box3D& a, const Box3D& b);
/// 1 - IoU of the two boxes after aligning centers and yaw.
double scale_error(const Box3D& a, const Box3D& b);
/// Smallest absolute yaw difference, in [0, pi].
double orientation_error(const Box3D& a, const Box3D& b);

}  // namespace aop
