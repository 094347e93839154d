#include "aop/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace aop {

namespace {
bool power_of_two_at_least_8(int v) { return v >= 8 && (v & (v - 1)) == 0; }
}  // namespace

void GridSpec::validate() const {
  if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min)) throw ConfigError("grid ranges must be nonempty");
  if (!power_of_two_at_least_8(H) || !power_of_two_at_least_8(W) || !power_of_two_at_least_8(Z)) {
    throw ConfigError("grid H, W, Z must be powers of two >= 8");
  }
}

bool GridSpec::locate(const Point& p, int& iz, int& row, int& col) const {
  const double fx = std::floor((p.x - x_min) / vx());
  const double fy = std::floor((p.y - y_min) / vy());
  const double fz = std::floor((p.z - z_min) / vz());
  if (fx < 0 || fx >= W || fy < 0 || fy >= H || fz < 0 || fz >= Z) return false;
  col = static_cast<int>(fx);
  row = static_cast<int>(fy);
  iz = static_cast<int>(fz);
  return true;
}

RawVoxels voxelize_raw(const PointCloud& pc, const GridSpec& grid) {
  RawVoxels out;
  out.grid = grid;
  const std::size_t nvox = static_cast<std::size_t>(grid.Z) * grid.H * grid.W;
  out.occupancy.assign(nvox, 0);
  out.point_voxel.assign(pc.size(), -1);
  std::vector<std::pair<int, int>> order;  // (voxel, point)
  for (std::size_t i = 0; i < pc.size(); ++i) {
    int iz, r, c;
    if (!grid.locate(pc[i], iz, r, c)) continue;
    const int v = (iz * grid.H + r) * grid.W + c;
    out.point_voxel[i] = v;
    order.emplace_back(v, static_cast<int>(i));
  }
  std::sort(order.begin(), order.end());
  for (std::size_t s = 0; s < order.size();) {
    std::size_t e = s;
    double sx = 0, sy = 0, sz = 0, si = 0;
    while (e < order.size() && order[e].first == order[s].first) {
      const Point& p = pc[order[e].second];
      sx += p.x;
      sy += p.y;
      sz += p.z;
      si += p.intensity;
      ++e;
    }
    const int v = order[s].first;
    const int iz = v / (grid.H * grid.W), r = (v / grid.W) % grid.H, c = v % grid.W;
    const double n = static_cast<double>(e - s);
    const double cx = grid.x_min + (c + 0.5) * grid.vx();
    const double cy = grid.y_min + (r + 0.5) * grid.vy();
    const double cz = grid.z_min + (iz + 0.5) * grid.vz();
    out.occupied.push_back(v);
    out.occupancy[v] = 1;
    out.features.push_back(static_cast<float>((sx / n - cx) / grid.vx()));
    out.features.push_back(static_cast<float>((sy / n - cy) / grid.vy()));
    out.features.push_back(static_cast<float>((sz / n - cz) / grid.vz()));
    out.features.push_back(static_cast<float>(si / n));
    out.features.push_back(static_cast<float>(std::log1p(n)));
    s = e;
  }
  return out;
}

template <typename T>
VoxelFeatureVolume<T> embed_voxels(const RawVoxels& raw, const Linear<T>& embed) {
  const GridSpec& g = raw.grid;
  const int n = static_cast<int>(raw.occupied.size());
  const int c0 = embed.weight.dim(1);
  const int nvox = g.Z * g.H * g.W;
  VoxelFeatureVolume<T> out;
  out.occupancy = raw.occupancy;
  if (n == 0) {
    out.features = Tensor<T>::zeros({c0, g.Z, g.H, g.W});
    return out;
  }
  std::vector<T> feats(raw.features.begin(), raw.features.end());
  auto x = Tensor<T>::from_data({n, kRawVoxelFeatures}, std::move(feats));
  auto cols = ops::transpose(embed(x));  // [C0, n]
  out.features = ops::reshape(ops::scatter_cols(cols, raw.occupied, nvox), {c0, g.Z, g.H, g.W});
  return out;
}

template <typename T>
Tensor<T> average_over_height(const VoxelFeatureVolume<T>& v) {
  return ops::masked_mean_over_depth(v.features, v.occupancy);
}

template <typename T>
Tensor<T> bev_collapse(const VoxelFeatureVolume<T>& v) {
  const auto& s = v.features.shape();
  if (s.size() != 4) throw DimensionError("bev_collapse: expected [C, D, H, W]");
  return ops::reshape(v.features, {s[0] * s[1], s[2], s[3]});
}

bool nearer(const Point& a, const Point& b) {
  const double ra = std::sqrt(static_cast<double>(a.x) * a.x + static_cast<double>(a.y) * a.y +
                              static_cast<double>(a.z) * a.z);
  const double rb = std::sqrt(static_cast<double>(b.x) * b.x + static_cast<double>(b.y) * b.y +
                              static_cast<double>(b.z) * b.z);
  if (ra != rb) return ra < rb;
  return std::tie(a.x, a.y, a.z, a.intensity) < std::tie(b.x, b.y, b.z, b.intensity);
}

RVImage project_rv(const PointCloud& pc, const RVSpec& spec) {
  if (spec.height < 1 || spec.width < 1 || !(spec.fov_up_deg > spec.fov_down_deg)) {
    throw ConfigError("invalid range-view spec");
  }
  RVImage img;
  img.height = spec.height;
  img.width = spec.width;
  img.index.assign(static_cast<std::size_t>(spec.height) * spec.width, -1);
  img.point_pixel.assign(pc.size(), -1);
  const double fov = spec.fov_up_deg - spec.fov_down_deg;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Point& p = pc[i];
    const double r = std::sqrt(static_cast<double>(p.x) * p.x + static_cast<double>(p.y) * p.y +
                               static_cast<double>(p.z) * p.z);
    if (r == 0.0) continue;
    const double phi = std::atan2(static_cast<double>(p.y), static_cast<double>(p.x));
    int col = static_cast<int>(std::floor((phi + M_PI) / (2 * M_PI) * spec.width));
    col = ((col % spec.width) + spec.width) % spec.width;
    const double incl = std::asin(std::clamp(p.z / r, -1.0, 1.0)) * 180.0 / M_PI;
    int row = static_cast<int>(std::floor((spec.fov_up_deg - incl) / fov * spec.height));
    row = std::clamp(row, 0, spec.height - 1);
    const int pix = row * spec.width + col;
    img.point_pixel[i] = pix;
    int& slot = img.index[pix];
    if (slot < 0 || nearer(p, pc[slot])) slot = static_cast<int>(i);
  }
  const std::size_t hw = img.index.size();
  std::vector<float> f(5 * hw, 0.0f);
  for (std::size_t q = 0; q < hw; ++q) {
    if (img.index[q] < 0) continue;
    const Point& p = pc[img.index[q]];
    f[q] = p.x;
    f[hw + q] = p.y;
    f[2 * hw + q] = p.z;
    f[3 * hw + q] = static_cast<float>(std::sqrt(static_cast<double>(p.x) * p.x + static_cast<double>(p.y) * p.y +
                                                 static_cast<double>(p.z) * p.z));
    f[4 * hw + q] = p.intensity;
  }
  img.features = Tensor<float>::from_data({5, spec.height, spec.width}, std::move(f));
  return img;
}

std::vector<int> downsample_rv_index(const std::vector<int>& index, int height, int width, int factor,
                                     const PointCloud& pc) {
  if (factor < 1 || height % factor != 0 || width % factor != 0) {
    throw DimensionError("downsample_rv_index: extents not divisible by factor");
  }
  const int h = height / factor, w = width / factor;
  std::vector<int> out(static_cast<std::size_t>(h) * w, -1);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      int& best = out[i * w + j];
      for (int a = 0; a < factor; ++a)
        for (int b = 0; b < factor; ++b) {
          const int p = index[(i * factor + a) * width + j * factor + b];
          if (p >= 0 && (best < 0 || nearer(pc[p], pc[best]))) best = p;
        }
    }
  return out;
}

std::vector<int> rv_voxel_index(const std::vector<int>& rv_index, const std::vector<int>& point_voxel,
                                const GridSpec& g, std::array<int, 3> stride) {
  const int h = g.H / stride[1], w = g.W / stride[2];
  std::vector<int> out(rv_index.size(), -1);
  for (std::size_t q = 0; q < rv_index.size(); ++q) {
    const int p = rv_index[q];
    if (p < 0) continue;
    const int v = point_voxel[p];
    if (v < 0) continue;
    const int iz = v / (g.H * g.W), r = (v / g.W) % g.H, c = v % g.W;
    out[q] = ((iz / stride[0]) * h + r / stride[1]) * w + c / stride[2];
  }
  return out;
}

template <typename T>
Tensor<T> voxel_to_rv(const Tensor<T>& v, const std::vector<int>& voxel_index, int h, int w,
                      const Conv2d<T>& compress) {
  if (v.rank() != 4) throw DimensionError("voxel_to_rv: expected [C, D, H, W]");
  if (voxel_index.size() != static_cast<std::size_t>(h) * w) throw DimensionError("voxel_to_rv: index size");
  const int c = v.dim(0);
  auto flat = ops::reshape(v, {c, static_cast<int>(v.numel() / c)});
  auto gathered = ops::reshape(ops::gather_cols(flat, voxel_index), {c, h, w});
  return compress(gathered);
}

InstanceMask rasterize_instances(const PointCloud& pc, const std::vector<std::uint32_t>& ids, const GridSpec& g,
                                 int factor) {
  if (ids.size() != pc.size()) throw DimensionError("rasterize_instances: one ID per point required");
  if (factor < 1 || g.H % factor != 0 || g.W % factor != 0) throw DimensionError("rasterize_instances: bad factor");
  InstanceMask m;
  m.height = g.H / factor;
  m.width = g.W / factor;
  const std::size_t ncell = static_cast<std::size_t>(m.height) * m.width;
  std::vector<std::map<std::uint32_t, int>> votes(ncell);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (ids[i] == 0) continue;
    int iz, r, c;
    if (!g.locate(pc[i], iz, r, c)) continue;
    votes[(r / factor) * m.width + c / factor][ids[i]]++;
  }
  std::vector<std::uint32_t> winner(ncell, 0);
  std::vector<std::uint32_t> present;
  for (std::size_t q = 0; q < ncell; ++q) {
    int best = 0;
    for (const auto& [id, n] : votes[q]) {
      if (n > best) {  // map iterates ascending, so ties keep the smaller ID
        best = n;
        winner[q] = id;
      }
    }
    if (winner[q]) present.push_back(winner[q]);
  }
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  m.registry = present;
  m.cells.assign(ncell, 0);
  for (std::size_t q = 0; q < ncell; ++q) {
    if (!winner[q]) continue;
    m.cells[q] = static_cast<int>(std::lower_bound(present.begin(), present.end(), winner[q]) - present.begin()) + 1;
  }
  return m;
}

template VoxelFeatureVolume<float> embed_voxels(const RawVoxels&, const Linear<float>&);
template VoxelFeatureVolume<double> embed_voxels(const RawVoxels&, const Linear<double>&);
template Tensor<float> average_over_height(const VoxelFeatureVolume<float>&);
template Tensor<double> average_over_height(const VoxelFeatureVolume<double>&);
template Tensor<float> bev_collapse(const VoxelFeatureVolume<float>&);
template Tensor<double> bev_collapse(const VoxelFeatureVolume<double>&);
template Tensor<float> voxel_to_rv(const Tensor<float>&, const std::vector<int>&, int, int, const Conv2d<float>&);
template Tensor<double> voxel_to_rv(const Tensor<double>&, const std::vector<int>&, int, int, const Conv2d<double>&);

}  // namespace aop
