#include "aop/detect.hpp"

#include <algorithm>
#include <cmath>

#include "aop/losses.hpp"

namespace aop {

double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + M_PI, 2 * M_PI);
  if (y < 0) y += 2 * M_PI;
  y -= M_PI;
  if (y >= M_PI) y -= 2 * M_PI;
  return y;
}

Tensor<float> foreground_scores(const Tensor<float>& logits, const RVImage& rv, const PointCloud& pc,
                                const GridSpec& grid, const ClassSet& classes, int factor) {
  const int c = logits.dim(0);
  const std::size_t hw = rv.index.size();
  const int nfg = classes.num_things();
  const int h = grid.H / factor, w = grid.W / factor;
  std::vector<float> s(static_cast<std::size_t>(nfg) * h * w, 0.0f);
  std::vector<double> prob(c);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const int q = rv.point_pixel[i];
    int iz, r, col;
    if (q < 0 || !grid.locate(pc[i], iz, r, col)) continue;
    double mx = logits[q];
    for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(logits[k * hw + q]));
    double z = 0;
    for (int k = 0; k < c; ++k) z += prob[k] = std::exp(logits[k * hw + q] - mx);
    const std::size_t cell = static_cast<std::size_t>(r / factor) * w + col / factor;
    for (int k = 0; k < c; ++k) {
      const int f = classes.thing_index(k);
      if (f < 0) continue;
      float& slot = s[f * h * w + cell];
      slot = std::max(slot, static_cast<float>(prob[k] / z));
    }
  }
  return Tensor<float>::from_data({nfg, h, w}, std::move(s));
}

template <typename T>
FusionAttention<T>::FusionAttention(ParamStore<T>& ps, const std::string& name, int bev_channels, int fg_channels) {
  typename ParamStore<T>::Scope scope(ps, name);
  gate = Conv2d<T>(ps, "gate", fg_channels, bev_channels, 1);
}

template <typename T>
Tensor<T> FusionAttention<T>::operator()(const Tensor<T>& bev, const Tensor<T>& scores) const {
  auto g = ops::sigmoid(gate(scores));
  return ops::concat<T>({ops::add(bev, ops::mul(bev, g)), scores}, 0);
}

template <typename T>
DetectHead<T>::DetectHead(ParamStore<T>& ps, const std::string& name, int in_channels, int trunk_channels,
                          int num_classes) {
  typename ParamStore<T>::Scope scope(ps, name);
  trunk_ = ConvBlock2d<T>(ps, "trunk", in_channels, trunk_channels);
  heat_ = Conv2d<T>(ps, "heatmap", trunk_channels, num_classes, 1);
  for (auto& b : heat_.bias.mutable_data()) b = static_cast<T>(-2.19);
  reg_ = Conv2d<T>(ps, "regression", trunk_channels, kRegressionChannels, 1);
}

template <typename T>
HeadOutput<T> DetectHead<T>::operator()(const Tensor<T>& features, bool training) {
  auto t = trunk_(features, training);
  return {ops::sigmoid(heat_(t)), reg_(t)};
}

int gaussian_radius(double height, double width, double min_overlap, int min_radius) {
  const double a1 = 1;
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * a1 * c1)) / 2;
  const double a2 = 4;
  const double b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4 * a2 * c2)) / 2;
  const double a3 = 4 * min_overlap;
  const double b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::max(min_radius, static_cast<int>(std::min({r1, r2, r3})));
}

DetectionTargets make_targets(const std::vector<Box3D>& boxes, const GridSpec& grid, int factor, int num_classes) {
  const int h = grid.H / factor, w = grid.W / factor;
  const double px = grid.vx() * factor, py = grid.vy() * factor;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  DetectionTargets t;
  std::vector<float> hm(num_classes * plane, 0.0f), reg(kRegressionChannels * plane, 0.0f),
      wt(kRegressionChannels * plane, 0.0f);
  for (const auto& b : boxes) {
    if (b.cls < 0 || b.cls >= num_classes) throw ContractError("make_targets: box class out of range");
    const double fx = (b.x - grid.x_min) / px, fy = (b.y - grid.y_min) / py;
    if (!(fx >= 0 && fx < w && fy >= 0 && fy < h)) {
      ++t.skipped;
      continue;
    }
    const int col = static_cast<int>(std::floor(fx)), row = static_cast<int>(std::floor(fy));
    const int radius = gaussian_radius(b.l / px, b.w / py);
    const double sigma = (2 * radius + 1) / 6.0;
    for (int dr = -radius; dr <= radius; ++dr)
      for (int dc = -radius; dc <= radius; ++dc) {
        const int r = row + dr, c = col + dc;
        if (r < 0 || r >= h || c < 0 || c >= w) continue;
        const float g = static_cast<float>(std::exp(-(dr * dr + dc * dc) / (2 * sigma * sigma)));
        float& slot = hm[b.cls * plane + r * w + c];
        slot = std::max(slot, g);
      }
    const std::size_t q = static_cast<std::size_t>(row) * w + col;
    const double vals[kRegressionChannels] = {fx - col,         fy - row,         b.z,
                                              std::log(b.l),    std::log(b.w),    std::log(b.h),
                                              std::sin(b.yaw),  std::cos(b.yaw)};
    for (int k = 0; k < kRegressionChannels; ++k) {
      reg[k * plane + q] = static_cast<float>(vals[k]);
      wt[k * plane + q] = 1.0f;
    }
  }
  t.heatmap = Tensor<float>::from_data({num_classes, h, w}, std::move(hm));
  t.regression = Tensor<float>::from_data({kRegressionChannels, h, w}, std::move(reg));
  t.weight = Tensor<float>::from_data({kRegressionChannels, h, w}, std::move(wt));
  return t;
}

std::vector<Box3D> decode_boxes(const Tensor<float>& heatmap, const Tensor<float>& regression, const GridSpec& grid,
                                int factor, double score_thresh, int max_dets) {
  const int nc = heatmap.dim(0), h = heatmap.dim(1), w = heatmap.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double px = grid.vx() * factor, py = grid.vy() * factor;
  struct Peak {
    float score;
    int cls;
    int cell;
  };
  std::vector<Peak> peaks;
  for (int c = 0; c < nc; ++c)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col) {
        const float v = heatmap[c * plane + r * w + col];
        if (!(v > score_thresh)) continue;
        bool keep = true;
        for (int dr = -1; dr <= 1 && keep; ++dr)
          for (int dc = -1; dc <= 1 && keep; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const int rr = r + dr, cc = col + dc;
            if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
            const float n = heatmap[c * plane + rr * w + cc];
            const bool earlier = dr < 0 || (dr == 0 && dc < 0);
            if (n > v || (earlier && n == v)) keep = false;
          }
        if (keep) peaks.push_back({v, c, r * w + col});
      }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (max_dets >= 0 && peaks.size() > static_cast<std::size_t>(max_dets)) peaks.resize(max_dets);
  std::vector<Box3D> out;
  for (const auto& p : peaks) {
    auto reg = [&](int k) { return static_cast<double>(regression[k * plane + p.cell]); };
    Box3D b;
    b.cls = p.cls;
    b.score = p.score;
    b.x = (p.cell % w + reg(0)) * px + grid.x_min;
    b.y = (p.cell / w + reg(1)) * py + grid.y_min;
    b.z = reg(2);
    b.l = std::exp(reg(3));
    b.w = std::exp(reg(4));
    b.h = std::exp(reg(5));
    b.yaw = normalize_yaw(std::atan2(reg(6), reg(7)));
    out.push_back(b);
  }
  return out;
}

template <typename T>
Tensor<T> detection_loss(const HeadOutput<T>& out, const DetectionTargets& targets, double w_heatmap,
                         double w_regression) {
  auto hm = losses::focal_loss(out.heatmap, targets.heatmap.template cast<T>());
  auto reg = losses::l1_loss(out.regression, targets.regression.template cast<T>(), targets.weight.template cast<T>());
  return ops::add(ops::scale(hm, static_cast<T>(w_heatmap)), ops::scale(reg, static_cast<T>(w_regression)));
}

template struct FusionAttention<float>;
template struct FusionAttention<double>;
template class DetectHead<float>;
template class DetectHead<double>;
template Tensor<float> detection_loss(const HeadOutput<float>&, const DetectionTargets&, double, double);
template Tensor<double> detection_loss(const HeadOutput<double>&, const DetectionTargets&, double, double);

}  // namespace aop
