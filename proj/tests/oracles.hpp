#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <tuple>
#include <vector>

#include "aop/backbone3d.hpp"
#include "aop/detect.hpp"
#include "aop/ifr.hpp"
#include "aop/metrics.hpp"
#include "grad_check.hpp"

namespace aop::testing {

// ---------------------------------------------------------------- masks / IFR

struct Cell {
  std::uint32_t id;
  int row, col;
};

/// Mask from explicit cells; dense IDs follow ascending source ID.
inline InstanceMask make_mask(int h, int w, const std::vector<Cell>& cells) {
  InstanceMask m;
  m.height = h;
  m.width = w;
  m.cells.assign(static_cast<std::size_t>(h) * w, 0);
  std::set<std::uint32_t> ids;
  for (const auto& c : cells) ids.insert(c.id);
  m.registry.assign(ids.begin(), ids.end());
  for (const auto& c : cells) {
    const int dense = static_cast<int>(std::lower_bound(m.registry.begin(), m.registry.end(), c.id) - m.registry.begin()) + 1;
    m.cells[static_cast<std::size_t>(c.row) * w + c.col] = dense;
  }
  return m;
}

/// Coarser mask: a coarse cell takes the first instance found in scan order.
inline InstanceMask downsample(const InstanceMask& fine, int f) {
  std::vector<Cell> cells;
  std::set<std::pair<int, int>> seen;
  for (int r = 0; r < fine.height; ++r)
    for (int c = 0; c < fine.width; ++c) {
      const int id = fine.at(r, c);
      if (id == 0 || !seen.insert({r / f, c / f}).second) continue;
      cells.push_back({fine.registry[id - 1], r / f, c / f});
    }
  return make_mask(fine.height / f, fine.width / f, cells);
}

inline InstanceMask random_mask(int h, int w, int instances, double fill, Rng& rng) {
  std::vector<Cell> cells;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (rng.uniform() < fill) cells.push_back({static_cast<std::uint32_t>(1 + rng.below(instances)), r, c});
  return make_mask(h, w, cells);
}

/// Brute force: sort every cell of each instance by squared distance to its
/// center (ties by raster order) and keep the first k.
inline std::vector<std::vector<int>> brute_force_k_nearest(const InstanceMask& m, const std::vector<CellCenter>& centers,
                                                           int k) {
  std::vector<std::vector<int>> out;
  for (int id = 1; id <= m.count(); ++id) {
    std::vector<std::tuple<double, int, int>> all;
    for (int r = 0; r < m.height; ++r)
      for (int c = 0; c < m.width; ++c)
        if (m.at(r, c) == id) {
          const double dr = r - centers[id - 1].row, dc = c - centers[id - 1].col;
          all.emplace_back(dr * dr + dc * dc, r, c);
        }
    if (all.empty()) continue;
    std::sort(all.begin(), all.end());
    all.resize(std::min<std::size_t>(all.size(), k));
    std::vector<int> cells;
    for (const auto& [d, r, c] : all) cells.push_back(r * m.width + c);
    out.push_back(cells);
  }
  return out;
}

/// Random 4..13 x 4..13 mask with 1..5 instances and a random K; true when
/// select_k_nearest agrees with the brute force exactly.
inline bool select_k_matches_brute_force(Rng& rng) {
  const int h = 4 + static_cast<int>(rng.below(10)), w = 4 + static_cast<int>(rng.below(10));
  const int k = 1 + static_cast<int>(rng.below(30));
  const auto m = random_mask(h, w, 1 + static_cast<int>(rng.below(5)), rng.uniform(0.1, 0.9), rng);
  const auto centers = mass_centers(m);
  const auto got = select_k_nearest(m, centers, k);
  const auto expect = brute_force_k_nearest(m, centers, k);
  if (got.size() != expect.size()) return false;
  for (std::size_t i = 0; i < got.size(); ++i)
    if (got[i].cells != expect[i]) return false;
  return true;
}

/// Moves every bias, beta and gamma away from its initial value.
template <typename T>
void randomize_affine(ParamStore<T>& ps, Rng& rng) {
  for (const auto& e : ps.entries()) {
    const auto& n = e.name;
    if (e.kind != ParamKind::Weight) continue;
    if (n.ends_with(".bias") || n.ends_with(".beta") || n.ends_with(".gamma")) {
      auto t = e.tensor;
      for (auto& v : t.mutable_data()) v = static_cast<T>((n.ends_with(".gamma") ? 1.0 : 0.0) + rng.uniform(-0.5, 0.5));
    }
  }
}

inline IfrConfig thin_ifr() {
  IfrConfig c;
  c.feature_channels = 3;
  c.code_width = 2;
  c.vfe_ratio = 4;
  c.mlp_ratio = 2;
  c.k_s1 = 4;
  c.k_s2 = 3;
  return c;
}

/// Instance shape at s1 resolution, anchored at (r0, c0).
inline std::vector<Cell> blob(std::uint32_t id, int r0, int c0) {
  return {{id, r0, c0}, {id, r0, c0 + 1}, {id, r0 + 1, c0}, {id, r0 + 1, c0 + 1}, {id, r0 + 2, c0 + 1},
          {id, r0 + 1, c0 + 2}, {id, r0 + 3, c0 + 2}};
}

struct IfrCase {
  Tensor<double> avg1, avg2;
  InstanceMask m1, m2, coarse;
};

/// Two copies of one instance on a 16x16 s1 grid, the second moved by
/// `shift` cells along both axes together with its feature neighbourhood.
inline IfrCase twin_case(Rng& rng, int shift) {
  const int c = thin_ifr().feature_channels;
  auto cells = blob(1, 1, 1);
  for (auto cell : blob(2, 1 + shift, 1 + shift)) cells.push_back(cell);
  IfrCase k;
  k.m1 = make_mask(16, 16, cells);
  k.m2 = downsample(k.m1, 2);
  k.coarse = downsample(k.m1, 4);
  k.avg1 = random_tensor({c, 16, 16}, rng);
  k.avg2 = random_tensor({c, 8, 8}, rng);
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < 8; ++r)
      for (int col = 0; col < 8; ++col)
        k.avg1.mutable_data()[(ch * 16 + r + shift) * 16 + col + shift] = k.avg1[(ch * 16 + r) * 16 + col];
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col)
        k.avg2.mutable_data()[(ch * 8 + r + shift / 2) * 8 + col + shift / 2] = k.avg2[(ch * 8 + r) * 8 + col];
  }
  return k;
}

/// Sparse random volume: each voxel occupied with probability p.
template <typename T>
VoxelFeatureVolume<T> random_volume(int c, int d, int h, int w, double p, Rng& rng) {
  VoxelFeatureVolume<T> v;
  v.occupancy.assign(static_cast<std::size_t>(d) * h * w, 0);
  std::vector<T> vals(static_cast<std::size_t>(c) * d * h * w, T(0));
  for (std::size_t q = 0; q < v.occupancy.size(); ++q) {
    if (rng.uniform() >= p) continue;
    v.occupancy[q] = 1;
    for (int k = 0; k < c; ++k) vals[k * v.occupancy.size() + q] = static_cast<T>(rng.uniform(-1, 1));
  }
  v.features = Tensor<T>::from_data({c, d, h, w}, std::move(vals));
  return v;
}

// ------------------------------------------------------------------ detection

inline constexpr int kDetFactor = 8;
inline constexpr int kDetClasses = 3;

/// Boxes on distinct coarse cells at Chebyshev distance >= 2. With dyadic
/// offsets the generated centre equals the decoder's reconstruction bit for bit.
inline std::vector<Box3D> random_boxes(const GridSpec& g, Rng& rng, bool dyadic) {
  const int h = g.H / kDetFactor, w = g.W / kDetFactor;
  const double px = g.vx() * kDetFactor, py = g.vy() * kDetFactor;
  std::vector<std::pair<int, int>> used;
  std::vector<Box3D> out;
  const int n = 1 + static_cast<int>(rng.below(8));
  for (int tries = 0; tries < 200 && static_cast<int>(out.size()) < n; ++tries) {
    const int r = static_cast<int>(rng.below(h)), c = static_cast<int>(rng.below(w));
    bool ok = true;
    for (auto [ur, uc] : used) ok &= std::max(std::abs(ur - r), std::abs(uc - c)) >= 2;
    if (!ok) continue;
    used.push_back({r, c});
    Box3D b;
    const double ox = dyadic ? static_cast<double>(rng.below(1024)) / 1024 : rng.uniform(0, 1);
    const double oy = dyadic ? static_cast<double>(rng.below(1024)) / 1024 : rng.uniform(0, 1);
    b.x = (c + ox) * px + g.x_min;
    b.y = (r + oy) * py + g.y_min;
    b.z = rng.uniform(-2, 1);
    b.l = rng.uniform(0.3, 5);
    b.w = rng.uniform(0.3, 2.5);
    b.h = rng.uniform(0.8, 2);
    b.yaw = normalize_yaw(rng.uniform(-4, 4));
    b.cls = static_cast<int>(rng.below(kDetClasses));
    out.push_back(b);
  }
  return out;
}

/// Decode order for unit peaks: class, then raster order.
inline void sort_like_decode(std::vector<Box3D>& boxes, const GridSpec& g) {
  const double px = g.vx() * kDetFactor, py = g.vy() * kDetFactor;
  auto key = [&](const Box3D& b) {
    return std::tuple(b.cls, static_cast<int>(std::floor((b.y - g.y_min) / py)),
                      static_cast<int>(std::floor((b.x - g.x_min) / px)));
  };
  std::stable_sort(boxes.begin(), boxes.end(), [&](const Box3D& a, const Box3D& b) { return key(a) < key(b); });
}

struct RoundTripError {
  bool count_ok = true;
  double center = 0, other = 0;  ///< max abs error
};

/// decode(make_targets(boxes)) against the input set.
inline RoundTripError detection_round_trip(const std::vector<Box3D>& boxes, const GridSpec& g) {
  const auto t = make_targets(boxes, g, kDetFactor, kDetClasses);
  RoundTripError e;
  if (t.skipped != 0) e.count_ok = false;
  auto got = decode_boxes(t.heatmap, t.regression, g, kDetFactor, 0.5, 1000);
  auto expect = boxes;
  sort_like_decode(expect, g);
  sort_like_decode(got, g);
  if (got.size() != expect.size()) {
    e.count_ok = false;
    return e;
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i].cls != expect[i].cls) e.count_ok = false;
    e.center = std::max({e.center, std::abs(got[i].x - expect[i].x), std::abs(got[i].y - expect[i].y)});
    e.other = std::max({e.other, std::abs(got[i].z - expect[i].z), std::abs(got[i].l - expect[i].l),
                        std::abs(got[i].w - expect[i].w), std::abs(got[i].h - expect[i].h),
                        std::abs(normalize_yaw(got[i].yaw - expect[i].yaw))});
  }
  return e;
}

// -------------------------------------------------------------------- metrics

inline ClassSet classes_with_void() {
  ClassSet c;
  c.void_class = 5;
  return c;
}

inline PanopticLabels random_labels(std::size_t n, Rng& rng, bool with_void) {
  PanopticLabels l;
  for (std::size_t i = 0; i < n; ++i) {
    int c = static_cast<int>(rng.below(with_void ? 6 : 5));
    l.semantic.push_back(c);
    const bool thing = c >= 2 && c <= 4;
    l.instance.push_back(thing ? static_cast<std::uint32_t>(rng.below(4)) : 0u);
  }
  return l;
}

/// Ground truth from random_labels and a prediction that copies most of it,
/// so that matches occur.
inline std::pair<PanopticLabels, PanopticLabels> random_panoptic_pair(Rng& rng) {
  const std::size_t n = 5 + rng.below(40);
  const auto gt = random_labels(n, rng, true);
  auto pred = random_labels(n, rng, false);
  for (std::size_t i = 0; i < n; ++i)
    if (rng.uniform() < 0.7 && gt.semantic[i] != 5) pred.semantic[i] = gt.semantic[i], pred.instance[i] = gt.instance[i];
  return {pred, gt};
}

/// Independent all-pairs matcher over explicit point sets.
struct PqOracle {
  int nc;
  std::vector<bool> thing;
  int void_class;
  std::vector<double> iou_sum;
  std::vector<int> tp, fp, fn;
  bool unique = true;  ///< false if some segment matched twice

  explicit PqOracle(const ClassSet& c)
      : nc(c.num_classes), thing(c.is_thing), void_class(c.void_class), iou_sum(nc, 0), tp(nc, 0), fp(nc, 0), fn(nc, 0) {}

  void add(const PanopticLabels& pred, const PanopticLabels& gt) {
    using Key = std::pair<int, std::uint32_t>;
    std::map<Key, std::set<std::size_t>> gseg, pseg;
    for (std::size_t i = 0; i < gt.semantic.size(); ++i) {
      if (gt.semantic[i] == void_class) continue;
      const int g = gt.semantic[i], p = pred.semantic[i];
      if (!thing[g] || gt.instance[i] != 0) gseg[{g, thing[g] ? gt.instance[i] : 0u}].insert(i);
      if (p >= 0 && p < nc && (!thing[p] || pred.instance[i] != 0)) pseg[{p, thing[p] ? pred.instance[i] : 0u}].insert(i);
    }
    std::set<Key> gm, pm;
    for (const auto& [gk, gs] : gseg)
      for (const auto& [pk, ps] : pseg) {
        if (gk.first != pk.first) continue;
        std::size_t inter = 0;
        for (auto i : gs) inter += ps.count(i);
        if (inter == 0) continue;
        const double iou = static_cast<double>(inter) / static_cast<double>(gs.size() + ps.size() - inter);
        if (iou > 0.5) {
          unique &= !(gm.count(gk) || pm.count(pk));
          ++tp[gk.first];
          iou_sum[gk.first] += iou;
          gm.insert(gk);
          pm.insert(pk);
        }
      }
    for (const auto& [k, s] : gseg) fn[k.first] += !gm.count(k);
    for (const auto& [k, s] : pseg) fp[k.first] += !pm.count(k);
  }

  double pq(int c) const {
    const double den = tp[c] + 0.5 * fp[c] + 0.5 * fn[c];
    return den > 0 ? 100.0 * iou_sum[c] / den : 0.0;
  }
};

inline std::vector<DetectionScene> random_detection_scenes(Rng& rng, int scenes, int max_boxes, bool tie_scores) {
  std::vector<DetectionScene> out(scenes);
  for (auto& s : out) {
    const int ng = static_cast<int>(rng.below(max_boxes + 1)), nd = static_cast<int>(rng.below(max_boxes + 1));
    for (int i = 0; i < ng; ++i) {
      Box3D b;
      b.x = rng.uniform(0, 8);
      b.y = rng.uniform(0, 8);
      b.l = rng.uniform(1, 4), b.w = rng.uniform(0.5, 2), b.h = rng.uniform(1, 2);
      b.yaw = rng.uniform(-3, 3);
      b.cls = static_cast<int>(rng.below(3));
      s.ground_truth.push_back(b);
    }
    for (int i = 0; i < nd; ++i) {
      Box3D b;
      if (ng > 0 && rng.uniform() < 0.6) {
        b = s.ground_truth[rng.below(ng)];
        b.x += rng.uniform(-2, 2);
        b.y += rng.uniform(-2, 2);
        b.l *= rng.uniform(0.8, 1.2);
        b.yaw += rng.uniform(-0.5, 0.5);
      } else {
        b.x = rng.uniform(0, 8);
        b.y = rng.uniform(0, 8);
        b.cls = static_cast<int>(rng.below(3));
      }
      b.score = tie_scores ? std::round(rng.uniform() * 4) / 4 : rng.uniform();
      s.detections.push_back(b);
    }
  }
  return out;
}

/// Exhaustive search over partial injective assignments of one class. The
/// greedy rule is the lexicographic optimum over detections in score order
/// of (matched first, then smaller distance).
inline std::vector<int> enumerate_best_assignment(const std::vector<DetectionScene>& scenes, int cls, double thr,
                                                  std::vector<std::pair<int, int>>& order) {
  order.clear();
  std::vector<std::tuple<double, int, int>> dets;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s)
    for (int i = 0; i < static_cast<int>(scenes[s].detections.size()); ++i)
      if (scenes[s].detections[i].cls == cls) dets.emplace_back(scenes[s].detections[i].score, s, i);
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  for (const auto& d : dets) order.push_back({std::get<1>(d), std::get<2>(d)});
  std::vector<int> best, cur(dets.size(), -1);
  std::vector<std::pair<int, double>> best_key;
  std::vector<std::set<int>> used(scenes.size());
  std::function<void(std::size_t)> rec = [&](std::size_t k) {
    if (k == dets.size()) {
      std::vector<std::pair<int, double>> key;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto& [sc, s, di] = dets[i];
        const double dist = cur[i] < 0 ? 0.0 : bev_center_distance(scenes[s].detections[di], scenes[s].ground_truth[cur[i]]);
        key.push_back({cur[i] < 0 ? 1 : 0, dist});
      }
      if (best_key.empty() || key < best_key) {
        best_key = key;
        best = cur;
      }
      return;
    }
    const auto& [sc, s, di] = dets[k];
    cur[k] = -1;
    rec(k + 1);
    const auto& gts = scenes[s].ground_truth;
    for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
      if (gts[g].cls != cls || used[s].count(g)) continue;
      if (!(bev_center_distance(scenes[s].detections[di], gts[g]) < thr)) continue;
      used[s].insert(g);
      cur[k] = g;
      rec(k + 1);
      used[s].erase(g);
      cur[k] = -1;
    }
  };
  rec(0);
  return best;
}

/// np.interp-style AP by linear search.
inline double oracle_ap(const std::vector<int>& match, int npos) {
  if (match.empty()) return 0.0;
  std::vector<double> p, r;
  int tp = 0;
  for (std::size_t i = 0; i < match.size(); ++i) {
    tp += match[i] >= 0;
    p.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    r.push_back(static_cast<double>(tp) / npos);
  }
  double acc = 0;
  for (int k = 11; k <= 100; ++k) {
    const double x = k / 100.0;
    double v;
    if (x < r.front()) {
      v = p.front();
    } else if (x > r.back()) {
      v = 0.0;
    } else if (x == r.back()) {
      v = p.back();
    } else {
      std::size_t j = 0;
      while (j + 1 < r.size() && r[j + 1] <= x) ++j;
      v = x == r[j] ? p[j] : p[j] + (x - r[j]) / (r[j + 1] - r[j]) * (p[j + 1] - p[j]);
    }
    acc += std::max(0.0, v - 0.1);
  }
  return acc / 90 / 0.9;
}

/// True when average_precision agrees exactly with the enumeration oracle on
/// every class and threshold of `scenes`.
inline bool ap_matches_oracle(const std::vector<DetectionScene>& scenes) {
  const auto r = average_precision(scenes, 3);
  for (int c = 0; c < 3; ++c) {
    int npos = 0;
    for (const auto& s : scenes)
      for (const auto& g : s.ground_truth) npos += g.cls == c;
    if (static_cast<bool>(r.class_present[c]) != (npos > 0)) return false;
    if (!npos) continue;
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
      std::vector<std::pair<int, int>> order, got_order;
      const auto expect = enumerate_best_assignment(scenes, c, r.thresholds[t], order);
      const auto got = greedy_match(scenes, c, r.thresholds[t], &got_order);
      if (got_order != order || got != expect || r.ap[c][t] != oracle_ap(expect, npos)) return false;
    }
  }
  return true;
}

}  // namespace aop::testing
