#include "aop/ifr.hpp"

#include <algorithm>
#include <tuple>

namespace aop {

std::vector<CellCenter> mass_centers(const InstanceMask& mask) {
  const int m = mask.count();
  std::vector<long> sr(m, 0), sc(m, 0), n(m, 0);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      const int id = mask.at(r, c);
      if (id <= 0) continue;
      if (id > m) throw ContractError("instance mask ID outside its registry");
      sr[id - 1] += r;
      sc[id - 1] += c;
      n[id - 1] += 1;
    }
  std::vector<CellCenter> out(m);
  for (int k = 0; k < m; ++k) {
    if (n[k] == 0) continue;
    out[k].row = static_cast<double>(sr[k]) / static_cast<double>(n[k]);
    out[k].col = static_cast<double>(sc[k]) / static_cast<double>(n[k]);
  }
  return out;
}

std::vector<InstanceCells> select_k_nearest(const InstanceMask& mask, const std::vector<CellCenter>& centers, int k) {
  if (k < 1) throw ContractError("select_k_nearest: K must be >= 1");
  const int m = mask.count();
  if (static_cast<int>(centers.size()) != m) throw DimensionError("select_k_nearest: one center per instance");
  std::vector<std::vector<std::tuple<double, int, int>>> cand(m);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      const int id = mask.at(r, c);
      if (id <= 0) continue;
      const double dr = r - centers[id - 1].row, dc = c - centers[id - 1].col;
      cand[id - 1].emplace_back(dr * dr + dc * dc, r, c);
    }
  std::vector<InstanceCells> out;
  for (int i = 0; i < m; ++i) {
    if (cand[i].empty()) continue;
    auto& v = cand[i];
    const std::size_t take = std::min<std::size_t>(k, v.size());
    std::partial_sort(v.begin(), v.begin() + take, v.end());
    InstanceCells s;
    s.id = i + 1;
    for (std::size_t j = 0; j < take; ++j) s.cells.push_back(std::get<1>(v[j]) * mask.width + std::get<2>(v[j]));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> position_embed(const InstanceCells& sample, const CellCenter& center, int width) {
  std::vector<double> p;
  p.reserve(2 * sample.cells.size());
  for (int cell : sample.cells) {
    p.push_back((cell % width) - center.col);
    p.push_back((cell / width) - center.row);
  }
  return p;
}

template <typename T>
Vfe<T>::Vfe(ParamStore<T>& ps, const std::string& name, int in, int hidden) {
  typename ParamStore<T>::Scope scope(ps, name);
  fc = Linear<T>(ps, "fc", in, hidden, false);
  bn = BatchNorm<T>(ps, "bn", hidden);
}

template <typename T>
Tensor<T> Vfe<T>::operator()(const Tensor<T>& members, const std::vector<int>& offsets, bool training) {
  if (members.rank() != 2 || members.dim(0) == 0) throw ContractError("vfe: needs a nonempty [n, d] member set");
  auto h = ops::relu(bn.rows(fc(members), training));
  auto mx = ops::broadcast_rows(ops::set_max_rows(h, offsets), offsets);
  return ops::concat<T>({h, mx}, 1);
}

template <typename T>
ScaleEncoder<T>::ScaleEncoder(ParamStore<T>& ps, const std::string& name, int in, const IfrConfig& cfg) {
  typename ParamStore<T>::Scope scope(ps, name);
  const int m = cfg.code_width;
  const int vfe_hidden = std::max(1, cfg.vfe_ratio * m / 2);
  vfe = Vfe<T>(ps, "vfe", in, vfe_hidden);
  mlp1 = Linear<T>(ps, "mlp1", 2 * vfe_hidden, cfg.mlp_ratio * m);
  mlp2 = Linear<T>(ps, "mlp2", cfg.mlp_ratio * m, m);
}

template <typename T>
Tensor<T> ScaleEncoder<T>::operator()(const Tensor<T>& members, const std::vector<int>& offsets, bool training) {
  auto v = mlp2(ops::relu(mlp1(vfe(members, offsets, training))));
  return ops::concat<T>({ops::set_mean_rows(v, offsets), ops::set_max_rows(v, offsets)}, 1);
}

template <typename T>
Ifr<T>::Ifr(ParamStore<T>& ps, const std::string& name, const IfrConfig& cfg) : cfg_(cfg) {
  typename ParamStore<T>::Scope scope(ps, name);
  enc1_ = ScaleEncoder<T>(ps, "s1", cfg.feature_channels + 2, cfg);
  enc2_ = ScaleEncoder<T>(ps, "s2", cfg.feature_channels + 2 + 2 * cfg.code_width, cfg);
}

template <typename T>
Tensor<T> Ifr<T>::gather_members(const Tensor<T>& avg, const InstanceMask& mask, const std::vector<InstanceCells>& sel,
                                 const std::vector<CellCenter>& centers, std::vector<int>& offsets) {
  if (avg.rank() != 3 || avg.dim(1) != mask.height || avg.dim(2) != mask.width) {
    throw DimensionError("ifr: averaged-voxel plane " + shape_str(avg.shape()) + " does not match its mask");
  }
  const int c = avg.dim(0);
  std::vector<int> cells;
  std::vector<T> pos;
  offsets.assign(1, 0);
  for (const auto& s : sel) {
    for (double v : position_embed(s, centers[s.id - 1], mask.width)) pos.push_back(static_cast<T>(v));
    cells.insert(cells.end(), s.cells.begin(), s.cells.end());
    offsets.push_back(static_cast<int>(cells.size()));
  }
  const int rows = static_cast<int>(cells.size());
  auto f = ops::transpose(ops::gather_cols(ops::reshape(avg, {c, mask.height * mask.width}), cells));
  return ops::concat<T>({f, Tensor<T>::from_data({rows, 2}, std::move(pos))}, 1);
}

namespace {
int dense_id(const InstanceMask& m, std::uint32_t source) {
  auto it = std::lower_bound(m.registry.begin(), m.registry.end(), source);
  if (it == m.registry.end() || *it != source) return 0;
  return static_cast<int>(it - m.registry.begin()) + 1;
}
}  // namespace

template <typename T>
IfrOutput<T> Ifr<T>::operator()(const Tensor<T>& avg_s1, const Tensor<T>& avg_s2, const InstanceMask& m1,
                                const InstanceMask& m2, const InstanceMask& coarse, bool training) {
  const int m = cfg_.code_width;
  const int total = coarse.count();
  IfrOutput<T> out;
  if (total == 0) {
    out.map = Tensor<T>::zeros({4 * m, coarse.height, coarse.width});
    out.codes = Tensor<T>::zeros({4 * m, 0});
    return out;
  }
  auto encode = [&](int scale, const Tensor<T>& avg, const InstanceMask& mask, int k, const Tensor<T>* cascade,
                    std::vector<InstanceCells>& used) {
    const auto centers = mass_centers(mask);
    const auto all = select_k_nearest(mask, centers, k);
    std::vector<int> slots;  // coarse instance index of each encoded set
    for (int j = 0; j < total; ++j) {
      const int id = dense_id(mask, coarse.registry[j]);
      if (id == 0) continue;
      for (const auto& s : all)
        if (s.id == id) used.push_back(s);
      slots.push_back(j);
    }
    if (slots.empty()) return Tensor<T>::zeros({2 * m, total});
    std::vector<int> offsets;
    auto members = gather_members(avg, mask, used, centers, offsets);
    if (cascade) {
      auto per_set = ops::transpose(ops::gather_cols(*cascade, slots));
      members = ops::concat<T>({members, ops::broadcast_rows(per_set, offsets)}, 1);
    }
    auto codes = encoder(scale)(members, offsets, training);  // [sets, 2m]
    return ops::scatter_cols(ops::transpose(codes), slots, total);
  };
  auto full1 = encode(0, avg_s1, m1, cfg_.k_s1, nullptr, out.selected_s1);
  auto full2 = encode(1, avg_s2, m2, cfg_.k_s2, &full1, out.selected_s2);
  out.codes = ops::concat<T>({full1, full2}, 0);
  std::vector<int> cell_slot(coarse.cells.size());
  for (std::size_t q = 0; q < cell_slot.size(); ++q) cell_slot[q] = coarse.cells[q] - 1;
  out.map = ops::reshape(ops::gather_cols(out.codes, cell_slot), {4 * m, coarse.height, coarse.width});
  return out;
}

template struct Vfe<float>;
template struct Vfe<double>;
template struct ScaleEncoder<float>;
template struct ScaleEncoder<double>;
template class Ifr<float>;
template class Ifr<double>;

}  // namespace aop
