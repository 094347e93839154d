#include "aop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace aop {

namespace {

double percent_ratio(double num, double den) { return den > 0 ? 100.0 * num / den : 0.0; }

}  // namespace

PanopticAccumulator::PanopticAccumulator(ClassSet classes)
    : classes_(std::move(classes)),
      iou_sum_(classes_.num_classes, 0.0),
      tp_(classes_.num_classes, 0),
      fp_(classes_.num_classes, 0),
      fn_(classes_.num_classes, 0),
      confusion_(static_cast<std::size_t>(classes_.num_classes) * classes_.num_classes, 0) {}

void PanopticAccumulator::add(const PanopticLabels& pred, const PanopticLabels& gt) {
  const std::size_t n = gt.semantic.size();
  if (pred.semantic.size() != n || pred.instance.size() != n || gt.instance.size() != n) {
    throw ContractError("panoptic_quality: label arrays differ in length");
  }
  const int nc = classes_.num_classes;
  // A segment is (class, instance); stuff classes use instance 0 as their
  // single per-scene segment, thing points with instance 0 have no segment.
  using Seg = std::pair<int, std::uint32_t>;
  std::map<Seg, std::int64_t> pred_area, gt_area;
  std::map<std::pair<Seg, Seg>, std::int64_t> inter;
  auto segment_of = [&](int c, std::uint32_t id, Seg& out) {
    if (c < 0 || c >= nc) return false;
    if (classes_.thing(c)) {
      if (id == 0) return false;
      out = {c, id};
    } else {
      out = {c, 0};
    }
    return true;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const int g = gt.semantic[i], p = pred.semantic[i];
    if (g == classes_.void_class) continue;
    if (g < 0 || g >= nc) throw ContractError("panoptic_quality: ground-truth class out of range");
    if (p >= 0 && p < nc) ++confusion_[static_cast<std::size_t>(g) * nc + p];
    Seg gs, ps;
    const bool has_g = segment_of(g, gt.instance[i], gs);
    const bool has_p = segment_of(p, pred.instance[i], ps);
    if (has_g) ++gt_area[gs];
    if (has_p) ++pred_area[ps];
    if (has_g && has_p && gs.first == ps.first) ++inter[{gs, ps}];
  }
  std::map<Seg, bool> pred_matched, gt_matched;
  for (const auto& [pair, count] : inter) {
    const auto& [gs, ps] = pair;
    const double iou = static_cast<double>(count) / static_cast<double>(gt_area[gs] + pred_area[ps] - count);
    if (iou > 0.5) {
      ++tp_[gs.first];
      iou_sum_[gs.first] += iou;
      gt_matched[gs] = pred_matched[ps] = true;
    }
  }
  for (const auto& [s, a] : gt_area)
    if (!gt_matched.count(s)) ++fn_[s.first];
  for (const auto& [s, a] : pred_area)
    if (!pred_matched.count(s)) ++fp_[s.first];
}

PanopticScore PanopticAccumulator::score() const {
  const int nc = classes_.num_classes;
  PanopticScore s;
  s.per_class.resize(nc);
  double pq = 0, rq = 0, sq = 0, th = 0, st = 0, miou = 0;
  int n = 0, n_th = 0, n_st = 0, n_iou = 0;
  for (int c = 0; c < nc; ++c) {
    auto& q = s.per_class[c];
    q.tp = tp_[c];
    q.fp = fp_[c];
    q.fn = fn_[c];
    q.iou_sum = iou_sum_[c];
    const double denom = q.tp + 0.5 * q.fp + 0.5 * q.fn;
    q.present = denom > 0;
    q.sq = q.tp > 0 ? 100.0 * q.iou_sum / q.tp : 0.0;
    q.rq = percent_ratio(q.tp, denom);
    q.pq = percent_ratio(q.iou_sum, denom);
    std::int64_t diag = confusion_[static_cast<std::size_t>(c) * nc + c], row = 0, col = 0;
    for (int k = 0; k < nc; ++k) {
      row += confusion_[static_cast<std::size_t>(c) * nc + k];
      col += confusion_[static_cast<std::size_t>(k) * nc + c];
    }
    const std::int64_t uni = row + col - diag;
    q.iou = percent_ratio(static_cast<double>(diag), static_cast<double>(uni));
    if (uni > 0) {
      miou += q.iou;
      ++n_iou;
    }
    if (!q.present) continue;
    pq += q.pq;
    rq += q.rq;
    sq += q.sq;
    ++n;
    if (classes_.thing(c)) {
      th += q.pq;
      ++n_th;
    } else {
      st += q.pq;
      ++n_st;
    }
  }
  if (n) s.pq = pq / n, s.rq = rq / n, s.sq = sq / n;
  if (n_th) s.pq_th = th / n_th;
  if (n_st) s.pq_st = st / n_st;
  if (n_iou) s.miou = miou / n_iou;
  return s;
}

PanopticScore panoptic_quality(const PanopticLabels& pred, const PanopticLabels& gt, const ClassSet& classes) {
  PanopticAccumulator acc(classes);
  acc.add(pred, gt);
  return acc.score();
}

double bev_center_distance(const Box3D& a, const Box3D& b) { return std::hypot(a.x - b.x, a.y - b.y); }

double scale_error(const Box3D& a, const Box3D& b) {
  const double inter = std::min(a.l, b.l) * std::min(a.w, b.w) * std::min(a.h, b.h);
  const double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  return 1.0 - inter / uni;
}

double orientation_error(const Box3D& a, const Box3D& b) { return std::abs(normalize_yaw(a.yaw - b.yaw)); }

std::vector<int> greedy_match(const std::vector<DetectionScene>& scenes, int cls, double threshold,
                              std::vector<std::pair<int, int>>* order_out) {
  struct Det {
    double score;
    int scene, index;
  };
  std::vector<Det> dets;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s)
    for (int i = 0; i < static_cast<int>(scenes[s].detections.size()); ++i)
      if (scenes[s].detections[i].cls == cls) dets.push_back({scenes[s].detections[i].score, s, i});
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> taken(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) taken[s].assign(scenes[s].ground_truth.size(), false);
  std::vector<int> match;
  if (order_out) order_out->clear();
  for (const auto& d : dets) {
    const auto& gts = scenes[d.scene].ground_truth;
    const Box3D& box = scenes[d.scene].detections[d.index];
    int best = -1;
    double best_dist = threshold;
    for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
      if (gts[g].cls != cls || taken[d.scene][g]) continue;
      const double dist = bev_center_distance(box, gts[g]);
      if (dist < best_dist) {
        best_dist = dist;
        best = g;
      }
    }
    if (best >= 0) taken[d.scene][best] = true;
    match.push_back(best);
    if (order_out) order_out->push_back({d.scene, d.index});
  }
  return match;
}

double interpolated_ap(const std::vector<double>& precision, const std::vector<double>& recall) {
  if (precision.empty()) return 0.0;
  const int points = 101;
  const std::size_t n = recall.size();
  auto interp = [&](double x) {
    if (x < recall[0]) return precision[0];
    if (x > recall[n - 1]) return 0.0;
    if (x == recall[n - 1]) return precision[n - 1];
    // Last j with recall[j] <= x; then recall[j + 1] > x.
    const std::size_t j = static_cast<std::size_t>(std::upper_bound(recall.begin(), recall.end(), x) - recall.begin()) - 1;
    if (x == recall[j]) return precision[j];
    const double t = (x - recall[j]) / (recall[j + 1] - recall[j]);
    return precision[j] + t * (precision[j + 1] - precision[j]);
  };
  const int first = static_cast<int>(std::lround(100 * kApMinRecall)) + 1;
  double acc = 0;
  for (int k = first; k < points; ++k) acc += std::max(0.0, interp(k / 100.0) - kApMinPrecision);
  return acc / (points - first) / (1.0 - kApMinPrecision);
}

DetectionScore average_precision(const std::vector<DetectionScene>& scenes, int num_classes,
                                 const std::vector<double>& thresholds) {
  DetectionScore out;
  out.thresholds = thresholds;
  out.ap.assign(num_classes, std::vector<double>(thresholds.size(), 0.0));
  out.class_present.assign(num_classes, false);
  out.ate.assign(num_classes, 0.0);
  out.ase.assign(num_classes, 0.0);
  out.aoe.assign(num_classes, 0.0);
  double map = 0;
  int map_n = 0;
  double te = 0, se = 0, oe = 0;
  int err_n = 0;
  for (int c = 0; c < num_classes; ++c) {
    int npos = 0;
    for (const auto& s : scenes)
      for (const auto& g : s.ground_truth) npos += g.cls == c;
    out.class_present[c] = npos > 0;
    if (!npos) continue;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const auto match = greedy_match(scenes, c, thresholds[t]);
      std::vector<double> prec, rec;
      int tp = 0;
      for (std::size_t i = 0; i < match.size(); ++i) {
        tp += match[i] >= 0;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        rec.push_back(static_cast<double>(tp) / npos);
      }
      out.ap[c][t] = interpolated_ap(prec, rec);
      map += out.ap[c][t];
      ++map_n;
    }
    std::vector<std::pair<int, int>> order;
    const auto match = greedy_match(scenes, c, kTpErrorThreshold, &order);
    double cte = 0, cse = 0, coe = 0;
    int n = 0;
    for (std::size_t i = 0; i < match.size(); ++i) {
      if (match[i] < 0) continue;
      const auto& s = scenes[order[i].first];
      const Box3D& d = s.detections[order[i].second];
      const Box3D& g = s.ground_truth[match[i]];
      cte += bev_center_distance(d, g);
      cse += scale_error(d, g);
      coe += orientation_error(d, g);
      ++n;
    }
    if (n) {
      out.ate[c] = cte / n;
      out.ase[c] = cse / n;
      out.aoe[c] = coe / n;
    } else {
      out.ate[c] = out.ase[c] = out.aoe[c] = 1.0;
    }
    te += out.ate[c];
    se += out.ase[c];
    oe += out.aoe[c];
    ++err_n;
  }
  if (map_n) out.map = map / map_n;
  if (err_n) out.mate = te / err_n, out.mase = se / err_n, out.maoe = oe / err_n;
  return out;
}

}  // namespace aop
