#pragma once

#include <string>
#include <vector>

#include "aop/backbone3d.hpp"

namespace aop {

struct CellCenter {
  double row = 0;
  double col = 0;
};

/// Mean (row, col) of every instance's cells; entry k-1 belongs to dense ID k.
std::vector<CellCenter> mass_centers(const InstanceMask& mask);

struct InstanceCells {
  int id = 0;
  std::vector<int> cells;  ///< flat cell indices, nearest first
};

/// Per instance, its cells ordered by squared distance to the center with
/// (row, col) tie-break; the first min(K, count) are kept.
std::vector<InstanceCells> select_k_nearest(const InstanceMask& mask, const std::vector<CellCenter>& centers, int k);

/// Relative position (col - mean col, row - mean row) of each selected cell,
/// row-major [n, 2].
std::vector<double> position_embed(const InstanceCells& sample, const CellCenter& center, int width);

struct IfrConfig {
  int feature_channels = 32;  ///< averaged-voxel width (c1)
  int code_width = 32;        ///< MLP output width m
  int vfe_ratio = 4;
  int mlp_ratio = 4;
  int k_s1 = 16;
  int k_s2 = 25;
  int out_channels() const { return 4 * code_width; }
};

/// Set encoder: per-member bias-free linear + batch norm + ReLU, max over the set
/// concatenated back onto each member. Input [n, d], output [n, 2 d'].
template <typename T>
struct Vfe {
  Linear<T> fc;
  BatchNorm<T> bn;
  Vfe() = default;
  Vfe(ParamStore<T>& ps, const std::string& name, int in, int hidden);
  /// offsets delimit the member rows of each set (CSR, see ops::set_max_rows).
  Tensor<T> operator()(const Tensor<T>& members, const std::vector<int>& offsets, bool training);
};

/// v = Concat(AvgPool(MLP(VFE(members))), MaxPool(...)) for one retrieval scale.
template <typename T>
struct ScaleEncoder {
  Vfe<T> vfe;
  Linear<T> mlp1, mlp2;
  ScaleEncoder() = default;
  ScaleEncoder(ParamStore<T>& ps, const std::string& name, int in, const IfrConfig& cfg);
  /// members [rows, d] grouped by offsets; returns [sets, 2m].
  Tensor<T> operator()(const Tensor<T>& members, const std::vector<int>& offsets, bool training);
};

template <typename T>
struct IfrOutput {
  Tensor<T> map;  ///< [4m, H/8, W/8]
  std::vector<InstanceCells> selected_s1, selected_s2;
  Tensor<T> codes;  ///< [4m, M] per coarse instance
};

template <typename T>
class Ifr {
 public:
  Ifr() = default;
  Ifr(ParamStore<T>& ps, const std::string& name, const IfrConfig& cfg);

  /// masks: s1 (H/2), s2 (H/4) and coarse (H/8) rasterized from one prediction.
  IfrOutput<T> operator()(const Tensor<T>& avg_s1, const Tensor<T>& avg_s2, const InstanceMask& m1,
                          const InstanceMask& m2, const InstanceMask& coarse, bool training);
  const IfrConfig& config() const { return cfg_; }
  ScaleEncoder<T>& encoder(int scale) { return scale == 0 ? enc1_ : enc2_; }

  /// Member matrix [rows, C + 2 (+ cascade)] and CSR offsets for selected cells.
  static Tensor<T> gather_members(const Tensor<T>& avg, const InstanceMask& mask,
                                  const std::vector<InstanceCells>& sel, const std::vector<CellCenter>& centers,
                                  std::vector<int>& offsets);

 private:
  IfrConfig cfg_;
  ScaleEncoder<T> enc1_, enc2_;
};

}  // namespace aop
