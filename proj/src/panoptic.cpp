#include "aop/panoptic.hpp"

#include <algorithm>
#include <deque>
#include <map>

#include "aop/losses.hpp"

namespace aop {

int ClassSet::num_things() const {
  int n = 0;
  for (int c = 0; c < num_classes; ++c) n += thing(c) ? 1 : 0;
  return n;
}

int ClassSet::thing_index(int c) const {
  if (!thing(c)) return -1;
  int k = 0;
  for (int i = 0; i < c; ++i) k += thing(i) ? 1 : 0;
  return k;
}

RVFusionIndex build_fusion_index(const RVImage& rv, const PointCloud& pc, const RawVoxels& raw) {
  if (rv.height % 4 != 0 || rv.width % 4 != 0) throw ConfigError("range view extents must be divisible by 4");
  RVFusionIndex idx;
  const std::array<std::array<int, 3>, 3> strides{kStrideS1, kStrideS2, kStrideS3};
  for (int s = 0; s < 3; ++s) {
    const int f = 1 << s;
    idx.height[s] = rv.height / f;
    idx.width[s] = rv.width / f;
    const auto pix = f == 1 ? rv.index : downsample_rv_index(rv.index, rv.height, rv.width, f, pc);
    idx.voxel_index[s] = rv_voxel_index(pix, raw.point_voxel, raw.grid, strides[s]);
  }
  return idx;
}

template <typename T>
PanopticHead<T>::PanopticHead(ParamStore<T>& ps, const std::string& name, const PanopticHeadConfig& cfg) : cfg_(cfg) {
  typename ParamStore<T>::Scope scope(ps, name);
  const auto& w = cfg.widths;
  stem_ = ConvBlock2d<T>(ps, "stem", cfg.in_channels, w[0]);
  down1_ = ConvBlock2d<T>(ps, "down1", w[0], w[1], 2);
  down2_ = ConvBlock2d<T>(ps, "down2", w[1], w[2], 2);
  if (cfg.dual_task) {
    for (int s = 0; s < 3; ++s) {
      compress_[s] = Conv2d<T>(ps, "compress" + std::to_string(s), cfg.voxel_channels[s], w[s], 1, 1, false);
      cbam_[s] = Cbam<T>(ps, "cbam" + std::to_string(s), w[s]);
    }
  }
  auto make_decoder = [&](const std::string& dname, int out) {
    typename ParamStore<T>::Scope s(ps, dname);
    Decoder d;
    d.up2 = ConvBlock2d<T>(ps, "up2", w[2] + w[1], w[1]);
    d.up1 = ConvBlock2d<T>(ps, "up1", w[1] + w[0], w[0]);
    d.out = Conv2d<T>(ps, "out", w[0], out, 1);
    return d;
  };
  sem_ = make_decoder("semantic", cfg.num_classes);
  off_ = make_decoder("offset", 2);
}

template <typename T>
Tensor<T> PanopticHead<T>::decode(Decoder& d, const Tensor<T>& e1, const Tensor<T>& e2, const Tensor<T>& e3,
                                  bool training) {
  auto h = d.up2(ops::concat<T>({ops::upsample_nearest(e3, 2), e2}, 0), training);
  h = d.up1(ops::concat<T>({ops::upsample_nearest(h, 2), e1}, 0), training);
  return d.out(h);
}

template <typename T>
PanopticOutput<T> PanopticHead<T>::operator()(const Tensor<T>& rv_features, const ScalePyramid<T>* pyramid,
                                              const RVFusionIndex* index, bool training) {
  if (rv_features.rank() != 3 || rv_features.dim(0) != cfg_.in_channels) {
    throw DimensionError("panoptic head: bad RV input " + shape_str(rv_features.shape()));
  }
  if (cfg_.dual_task && (pyramid == nullptr || index == nullptr)) {
    throw ContractError("panoptic head: dual-task fusion needs the voxel pyramid");
  }
  auto fuse = [&](int s, const Tensor<T>& x) {
    if (!cfg_.dual_task) return x;
    const VoxelFeatureVolume<T>& v = s == 0 ? pyramid->s1 : (s == 1 ? pyramid->s2 : pyramid->s3);
    auto vox = voxel_to_rv(v.features, index->voxel_index[s], index->height[s], index->width[s], compress_[s]);
    return cbam_[s](x, vox);
  };
  auto e1 = fuse(0, stem_(rv_features, training));
  auto e2 = fuse(1, down1_(e1, training));
  auto e3 = fuse(2, down2_(e2, training));
  PanopticOutput<T> out;
  out.logits = decode(sem_, e1, e2, e3, training);
  out.offsets = decode(off_, e1, e2, e3, training);
  return out;
}

PanopticTargets make_panoptic_targets(const RVImage& rv, const PointCloud& pc, const std::vector<PointLabel>& labels,
                                      const ClassSet& classes) {
  if (labels.size() != pc.size()) throw DimensionError("panoptic targets: one label per point required");
  std::map<std::uint32_t, std::array<double, 3>> sums;  // instance -> (sum x, sum y, n)
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!classes.thing(labels[i].semantic) || labels[i].instance == 0) continue;
    auto& s = sums[labels[i].instance];
    s[0] += pc[i].x;
    s[1] += pc[i].y;
    s[2] += 1;
  }
  const std::size_t hw = rv.index.size();
  PanopticTargets t;
  t.labels.assign(hw, -1);
  t.foreground.assign(hw, 0);
  std::vector<float> off(2 * hw, 0.0f);
  for (std::size_t q = 0; q < hw; ++q) {
    const int p = rv.index[q];
    if (p < 0) continue;
    const int sem = labels[p].semantic;
    if (sem == classes.void_class || sem >= classes.num_classes) continue;
    t.labels[q] = sem;
    if (classes.thing(sem) && labels[p].instance != 0) {
      const auto& s = sums[labels[p].instance];
      t.foreground[q] = 1;
      off[q] = static_cast<float>(s[0] / s[2] - pc[p].x);
      off[hw + q] = static_cast<float>(s[1] / s[2] - pc[p].y);
    }
  }
  t.offsets = Tensor<float>::from_data({2, rv.height, rv.width}, std::move(off));
  return t;
}

template <typename T>
Tensor<T> panoptic_loss(const PanopticOutput<T>& out, const PanopticTargets& targets, double w_ce, double w_off,
                        const std::vector<double>& class_weights, bool* empty) {
  bool none = std::all_of(targets.labels.begin(), targets.labels.end(), [](int l) { return l < 0; });
  if (empty) *empty = none;
  auto ce = losses::cross_entropy(out.logits, targets.labels, class_weights);
  auto off = losses::l2_offset_loss(out.offsets, targets.offsets.template cast<T>(), targets.foreground);
  return ops::add(ops::scale(ce, static_cast<T>(w_ce)), ops::scale(off, static_cast<T>(w_off)));
}

std::vector<int> point_semantics(const Tensor<float>& logits, const RVImage& rv, std::size_t num_points) {
  const int c = logits.dim(0);
  const std::size_t hw = rv.index.size();
  std::vector<int> out(num_points, 0);
  for (std::size_t i = 0; i < num_points; ++i) {
    const int q = rv.point_pixel[i];
    if (q < 0) continue;
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (logits[k * hw + q] > logits[best * hw + q]) best = k;
    out[i] = best;
  }
  return out;
}

std::vector<std::uint32_t> cluster_instances(const Tensor<float>& offsets, const std::vector<int>& semantics,
                                             const PointCloud& pc, const RVImage& rv, const ClassSet& classes,
                                             const ClusterConfig& cfg) {
  if (semantics.size() != pc.size()) throw DimensionError("cluster_instances: one class per point required");
  if (!(cfg.pillar_size > 0)) throw ConfigError("pillar size must be positive");
  const std::size_t hw = rv.index.size();
  using Key = std::pair<long, long>;  // (row along y, col along x)
  std::map<Key, std::vector<int>> pillars;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!classes.thing(semantics[i])) continue;
    const int q = rv.point_pixel[i];
    if (q < 0) continue;
    const double sx = pc[i].x + offsets[q];
    const double sy = pc[i].y + offsets[hw + q];
    pillars[{static_cast<long>(std::floor(sy / cfg.pillar_size)), static_cast<long>(std::floor(sx / cfg.pillar_size))}]
        .push_back(static_cast<int>(i));
  }
  std::vector<std::uint32_t> ids(pc.size(), 0);
  std::map<Key, int> component;
  std::uint32_t next = 1;
  for (const auto& [start, unused] : pillars) {
    if (component.count(start)) continue;
    std::vector<Key> members;
    std::deque<Key> queue{start};
    component[start] = 1;
    while (!queue.empty()) {
      Key k = queue.front();
      queue.pop_front();
      members.push_back(k);
      const Key nbrs[4] = {{k.first - 1, k.second}, {k.first, k.second - 1}, {k.first, k.second + 1},
                           {k.first + 1, k.second}};
      for (const Key& n : nbrs) {
        if (pillars.count(n) && !component.count(n)) {
          component[n] = 1;
          queue.push_back(n);
        }
      }
    }
    std::size_t count = 0;
    for (const Key& k : members) count += pillars[k].size();
    if (count < static_cast<std::size_t>(cfg.min_points)) continue;
    for (const Key& k : members)
      for (int i : pillars[k]) ids[i] = next;
    ++next;
  }
  return ids;
}

void harmonize_instance_classes(std::vector<int>& semantics, const std::vector<std::uint32_t>& instances,
                                const ClassSet& classes) {
  std::map<std::uint32_t, std::vector<int>> votes;
  for (std::size_t i = 0; i < semantics.size(); ++i) {
    if (instances[i] == 0) continue;
    auto& v = votes[instances[i]];
    v.resize(classes.num_classes, 0);
    if (classes.thing(semantics[i])) v[semantics[i]]++;
  }
  std::map<std::uint32_t, int> winner;
  for (const auto& [id, v] : votes) winner[id] = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  for (std::size_t i = 0; i < semantics.size(); ++i)
    if (instances[i] != 0) semantics[i] = winner[instances[i]];
}

template class PanopticHead<float>;
template class PanopticHead<double>;
template Tensor<float> panoptic_loss(const PanopticOutput<float>&, const PanopticTargets&, double, double,
                                     const std::vector<double>&, bool*);
template Tensor<double> panoptic_loss(const PanopticOutput<double>&, const PanopticTargets&, double, double,
                                      const std::vector<double>&, bool*);

}  // namespace aop
