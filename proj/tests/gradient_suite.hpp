#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aop/losses.hpp"
#include "aop/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace aop::testing {

inline constexpr double kPrimitiveTol = 1e-4;
inline constexpr double kCompositeTol = 1e-3;

struct GradCase {
  std::string name;
  double tolerance = kPrimitiveTol;
  std::function<GradReport()> run;
};

namespace detail {

template <typename F>
GradCase primitive(std::string name, F f, std::vector<Tensor<double>> in, std::size_t samples = 64) {
  return {std::move(name), kPrimitiveTol, [f, in, samples] { return check_gradients(f, in, samples); }};
}

template <typename Make>
GradCase composite(std::string name, Make make, std::vector<Tensor<double>> in, std::size_t samples = 24,
                   double h = 1e-5) {
  return {std::move(name), kCompositeTol,
          [make, in, samples, h] { return check_module_gradients(make, in, samples, h); }};
}

}  // namespace detail

/// Every differentiable op and loss, checked at tolerance 1e-4.
inline std::vector<GradCase> primitive_gradient_cases() {
  Rng rng(21);
  auto x = random_tensor({3, 4, 6}, rng);
  auto y = random_tensor({3, 4, 6}, rng);
  auto gch = random_tensor({3}, rng);
  auto gsp = random_tensor({24}, rng);
  ops::Mask mask(24);
  for (auto& m : mask) m = rng.uniform() < 0.6;
  const std::vector<int> idx = {3, -1, 5, 0, 5, 23, 7};
  const std::vector<int> offsets = {0, 2, 3, 7};
  auto rows = random_tensor({7, 4}, rng);
  auto vol = random_tensor({2, 3, 4, 6}, rng);
  ops::Mask occ(3 * 4 * 6);
  for (auto& m : occ) m = rng.uniform() < 0.5;

  using detail::primitive;
#define AOP_PRIM(NAME, EXPR, ...) primitive(NAME, [=](auto& in) { return probe(EXPR); }, {__VA_ARGS__})
#define AOP_ELEM std::decay_t<decltype(in[0][0])>
  std::vector<GradCase> cases = {
      AOP_PRIM("add", ops::add(in[0], in[1]), x, y),
      AOP_PRIM("sub", ops::sub(in[0], in[1]), x, y),
      AOP_PRIM("mul", ops::mul(in[0], in[1]), x, y),
      AOP_PRIM("relu", ops::relu(in[0]), x),
      AOP_PRIM("sigmoid", ops::sigmoid(in[0]), x),
      AOP_PRIM("gelu", ops::gelu(in[0]), x),
      AOP_PRIM("softmax", ops::softmax_channels(in[0]), x),
      AOP_PRIM("transpose", ops::transpose(ops::reshape(in[0], {12, 6})), x),
      AOP_PRIM("concat0", ops::concat<AOP_ELEM>({in[0], in[1]}, 0), x, y),
      AOP_PRIM("concat2", ops::concat<AOP_ELEM>({in[0], in[1]}, 2), x, y),
      AOP_PRIM("mul_channel", ops::mul_channel(in[0], in[1]), x, gch),
      AOP_PRIM("mul_spatial", ops::mul_spatial(in[0], in[1]), x, gsp),
      AOP_PRIM("maxpool", ops::maxpool2d(in[0], 2, 2, 2, 2), x),
      AOP_PRIM("avgpool", ops::avgpool2d(in[0], 2, 3, 2, 3), x),
      AOP_PRIM("global_avg", ops::global_avg_pool(in[0]), x),
      AOP_PRIM("global_max", ops::global_max_pool(in[0]), x),
      AOP_PRIM("channel_mean", ops::channel_mean(in[0]), x),
      AOP_PRIM("channel_max", ops::channel_max(in[0]), x),
      AOP_PRIM("upsample", ops::upsample_nearest(in[0], 2), x),
      AOP_PRIM("gather", ops::gather_cols(ops::reshape(in[0], {3, 24}), idx), x),
      AOP_PRIM("scatter", ops::scatter_cols(in[0], std::vector<int>{1, 4, 1, 0}, 6), ops::reshape(rows, {7, 4})),
      AOP_PRIM("scatter_max", ops::scatter_max_cols(in[0], std::vector<int>{1, 4, 1, -1}, 6), rows),
      AOP_PRIM("depth_mean", ops::masked_mean_over_depth(in[0], occ), vol),
      AOP_PRIM("set_mean", ops::set_mean_rows(in[0], offsets), rows),
      AOP_PRIM("set_max", ops::set_max_rows(in[0], offsets), rows),
      AOP_PRIM("broadcast", ops::broadcast_rows(ops::set_mean_rows(in[0], offsets), offsets), rows),
      AOP_PRIM("linear", ops::linear(in[0], in[1], in[2]), random_tensor({4, 3}, rng), random_tensor({3, 5}, rng),
               random_tensor({5}, rng)),
      AOP_PRIM("conv2d", ops::conv2d(in[0], in[1], in[2], {1, 1}), random_tensor({2, 5, 6}, rng),
               random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)),
      AOP_PRIM("conv2d_stride2", ops::conv2d(in[0], in[1], in[2], {2, 1}), random_tensor({2, 5, 6}, rng),
               random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)),
      AOP_PRIM("depthwise_conv2d", ops::depthwise_conv2d(in[0], in[1], in[2]), random_tensor({3, 5, 5}, rng),
               random_tensor({3, 1, 3, 3}, rng), random_tensor({3}, rng)),
      AOP_PRIM("conv3d", ops::conv3d(in[0], in[1], in[2], {{2, 1, 2}, {1, 1, 1}, nullptr}),
               random_tensor({2, 4, 4, 4}, rng), random_tensor({2, 2, 3, 3, 3}, rng), random_tensor({2}, rng)),
      AOP_PRIM("conv3d_masked", ops::conv3d(in[0], in[1], in[2], {{1, 1, 1}, {1, 1, 1}, &occ}), vol,
               random_tensor({2, 2, 3, 3, 3}, rng), random_tensor({2}, rng)),
  };
#undef AOP_ELEM
#undef AOP_PRIM

  for (bool training : {true, false})
    for (bool masked : {false, true}) {
      const auto beta = random_tensor({3}, rng);
      cases.push_back(primitive(
          std::string("batch_norm") + (training ? "_train" : "_eval") + (masked ? "_masked" : ""),
          [=](auto& in) {
            using T = typename std::decay_t<decltype(in[0])>::value_type;
            auto rm = Tensor<T>::full({3}, T(0.1)), rv = Tensor<T>::full({3}, T(1.7));
            ops::BatchNormOptions opt;
            opt.training = training;
            opt.mask = masked ? &mask : nullptr;
            return probe(ops::batch_norm(in[0], in[1], in[2], rm, rv, opt));
          },
          {x, gch, beta}));
    }
  cases.push_back(primitive(
      "batch_norm_rows",
      [](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        auto rm = Tensor<T>::zeros({4}), rv = Tensor<T>::full({4}, T(1));
        return probe(ops::batch_norm_rows(in[0], in[1], in[2], rm, rv, {}));
      },
      {rows, random_tensor({4}, rng), random_tensor({4}, rng)}));

  // Losses.
  auto prob = random_tensor({2, 5}, rng, 0.05, 0.95);
  auto target = random_tensor({2, 5}, rng, 0.0, 1.0);
  target.mutable_data()[3] = 1.0;
  target.mutable_data()[8] = 1.0;
  auto pred = random_tensor({2, 6}, rng);
  auto tgt = random_tensor({2, 6}, rng);
  auto w = random_tensor({2, 6}, rng, 0.0, 1.0);
  const ops::Mask fg = {1, 0, 1, 1, 0, 1};
  cases.push_back(primitive(
      "focal_loss",
      [=](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        return losses::focal_loss(in[0], target.cast<T>());
      },
      {prob}));
  cases.push_back(primitive(
      "l1_loss",
      [=](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        return losses::l1_loss(in[0], tgt.cast<T>(), w.cast<T>());
      },
      {pred}));
  cases.push_back(primitive(
      "cross_entropy",
      [](auto& in) {
        return losses::cross_entropy(ops::reshape(in[0], {3, 4}), std::vector<int>{0, 2, -1, 1}, {0.5, 1.0, 2.0});
      },
      {pred}));
  cases.push_back(primitive(
      "l2_offset_loss",
      [=](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        return losses::l2_offset_loss(in[0], tgt.cast<T>(), fg);
      },
      {pred}));

  PanopticTargets pt;
  pt.labels = {0, 2, 1, -1, 2, 2, 0, 1, 1, 0, -1, 2};
  pt.foreground = {0, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1};
  pt.offsets = random_tensor({2, 3, 4}, rng).cast<float>();
  cases.push_back(primitive(
      "panoptic_loss",
      [=](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        return panoptic_loss(PanopticOutput<T>{in[0], in[1]}, pt, 0.7, 1.3);
      },
      {random_tensor({3, 3, 4}, rng), random_tensor({2, 3, 4}, rng)}));

  GridSpec g;
  g.H = g.W = 64;
  const auto dt = make_targets(random_boxes(g, rng, false), g, kDetFactor, kDetClasses);
  cases.push_back(primitive(
      "detection_loss",
      [=](auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        return detection_loss(HeadOutput<T>{ops::sigmoid(in[0]), in[1]}, dt, 0.8, 1.2);
      },
      {random_tensor({3, 8, 8}, rng, -3, 3), random_tensor({8, 8, 8}, rng)}, 512));
  return cases;
}

/// Thin-width composite blocks, checked at tolerance 1e-3. Every weight of
/// the block and every input is sampled. Steps of 1e-6 are used where a
/// ReLU input sits within 1e-5 of its kink.
inline std::vector<GradCase> composite_gradient_cases() {
  using detail::composite;
  Rng rng(40);
  std::vector<GradCase> cases;

  cases.push_back(composite(
      "sc_block",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<ScBlock<T>>(ps, "sc", ScBlockSpec{4, 2, 3});
        return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0])); };
      },
      {random_tensor({4, 5, 6}, rng)}));
  for (bool use_sc : {true, false}) {
    cases.push_back(composite(
        use_sc ? "sc_backbone" : "conv_backbone",
        [use_sc]<typename T>(ParamStore<T>& ps) {
          ScBackboneConfig cfg{3, 4, 4, 1, 2, 2, 2, use_sc, false};
          auto m = std::make_shared<ScBackbone<T>>(ps, "sc2d", cfg);
          return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0], true)); };
        },
        {random_tensor({3, 8, 8}, rng)}));
  }
  cases.push_back(composite(
      "cbam",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<Cbam<T>>(ps, "cbam", 4, 2, 3);
        return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0], in[1])); };
      },
      {random_tensor({4, 5, 6}, rng), random_tensor({4, 5, 6}, rng)}));

  const auto v = random_volume<double>(2, 16, 32, 32, 0.05, rng);
  cases.push_back(composite(
      "backbone3d",
      [occ = v.occupancy]<typename T>(ParamStore<T>& ps) {
        auto net = std::make_shared<Backbone3d<T>>(ps, "b3d", 2, 4, 8);
        return [net, occ](const std::vector<Tensor<T>>& in) {
          const auto p = (*net)(VoxelFeatureVolume<T>{in[0], occ}, true);
          return ops::add(ops::add(probe(p.s1.features, 1), probe(p.s2.features, 2)), probe(p.s3.features, 3));
        };
      },
      {v.features}, 24, 1e-6));

  PanopticHeadConfig rv_only;
  rv_only.in_channels = 5;
  rv_only.widths = {4, 6, 6};
  rv_only.num_classes = 3;
  rv_only.dual_task = false;
  cases.push_back(composite(
      "panoptic_head_rv_only",
      [rv_only]<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<PanopticHead<T>>(ps, "pan", rv_only);
        return [m](const std::vector<Tensor<T>>& in) {
          const auto o = (*m)(in[0], nullptr, nullptr, true);
          return ops::add(probe(o.logits, 1), probe(o.offsets, 2));
        };
      },
      {random_tensor({5, 8, 16}, rng)}, 16, 1e-6));

  cases.push_back({"panoptic_head_fused", kCompositeTol, [] {
                     const auto cfg = tiny_config();
                     const auto scene = tiny_input(cfg, 21);
                     // A fixed pyramid from a double backbone supplies occupancies and input values.
                     ParamStore<double> bps(5);
                     Linear<double> embed(bps, "embed", kRawVoxelFeatures, cfg.c0);
                     Backbone3d<double> b3d(bps, "b3d", cfg.c0, cfg.c1, cfg.c2);
                     const auto pyr = b3d(embed_voxels(scene.raw, embed), true);
                     PanopticHeadConfig hc;
                     hc.widths = {3, 4, 4};
                     hc.voxel_channels = {cfg.c1, cfg.c1, cfg.c2};
                     return check_module_gradients(
                         [&]<typename T>(ParamStore<T>& ps) {
                           auto m = std::make_shared<PanopticHead<T>>(ps, "pan", hc);
                           return [m, &pyr, &scene](const std::vector<Tensor<T>>& in) {
                             ScalePyramid<T> p{{in[1], pyr.s1.occupancy}, {in[2], pyr.s2.occupancy},
                                               {in[3], pyr.s3.occupancy}};
                             const auto o = (*m)(in[0], &p, &scene.fusion, true);
                             return ops::add(probe(o.logits, 1), probe(o.offsets, 2));
                           };
                         },
                         {scene.rv.features.cast<double>(), pyr.s1.features, pyr.s2.features, pyr.s3.features}, 16,
                         1e-6);
                   }});

  cases.push_back(composite(
      "vfe",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<Vfe<T>>(ps, "vfe", 3, 4);
        return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0], {0, 2, 5, 9}, true)); };
      },
      {random_tensor({9, 3}, rng)}, 36));
  cases.push_back(composite(
      "ifr_scale_encoder",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<ScaleEncoder<T>>(ps, "enc", 4, thin_ifr());
        return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0], {0, 3, 7}, true)); };
      },
      {random_tensor({7, 4}, rng)}, 28));
  const auto k = twin_case(rng, 6);
  cases.push_back(composite(
      "ifr",
      [k]<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<Ifr<T>>(ps, "ifr", thin_ifr());
        return [m, k](const std::vector<Tensor<T>>& in) {
          return probe((*m)(in[0], in[1], k.m1, k.m2, k.coarse, true).map);
        };
      },
      {k.avg1, k.avg2}, 64));

  cases.push_back(composite(
      "detect_head",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<DetectHead<T>>(ps, "det", 3, 4, 2);
        return [m](const std::vector<Tensor<T>>& in) {
          const auto o = (*m)(in[0], true);
          return ops::add(probe(o.heatmap, 1), probe(o.regression, 2));
        };
      },
      {random_tensor({3, 6, 6}, rng)}));
  cases.push_back(composite(
      "fusion_attention",
      []<typename T>(ParamStore<T>& ps) {
        auto m = std::make_shared<FusionAttention<T>>(ps, "fusion", 4, 3);
        return [m](const std::vector<Tensor<T>>& in) { return probe((*m)(in[0], in[1])); };
      },
      {random_tensor({4, 5, 5}, rng), random_tensor({3, 5, 5}, rng, 0, 1)}));
  return cases;
}

/// Whole-network checks of the joint loss on one tiny scene with
/// ground-truth masks. The foreground scores that feed the detection
/// branch are computed from detached logits, so the panoptic-loss pass
/// checks every weight with w_det = 0, and the detection-loss pass (w_pan
/// = 0) skips the weights upstream of those scores.
inline std::vector<GradCase> pipeline_gradient_cases(const RunConfig& base, const std::string& tag) {
  std::vector<GradCase> cases;
  for (bool detection : {false, true}) {
    auto cfg = base;
    (detection ? cfg.w_pan : cfg.w_det) = 0.0;
    cases.push_back({"pipeline" + tag + (detection ? "_detection_loss" : "_panoptic_loss"), kCompositeTol,
                     [cfg, detection] {
                       const auto scene = tiny_input(cfg, 13);
                       auto upstream = [&](const std::string& n) {
                         return n.starts_with("panoptic.") ||
                                (cfg.dual_task && (n.starts_with("embed.") || n.starts_with("backbone3d.")));
                       };
                       return check_module_gradients(
                           [&]<typename T>(ParamStore<T>& ps) {
                             auto m = std::make_shared<Pipeline<T>>(ps, cfg);
                             return [m, &scene, &cfg](const std::vector<Tensor<T>>&) {
                               return joint_loss(m->forward(scene, MaskSource::GroundTruth, true), scene, cfg);
                             };
                           },
                           {}, 4, 1e-6, 11, [&](const std::string& n) { return !detection || !upstream(n); });
                     }});
  }
  return cases;
}

}  // namespace aop::testing
