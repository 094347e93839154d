#include <gtest/gtest.h>

#include <cmath>

#include "aop/sc2d.hpp"
#include "grad_check.hpp"

using namespace aop;
using aop::testing::random_tensor;

TEST(ScBlock, ZeroInitResidualIsIdentity) {
  ParamStore<float> ps(1);
  ScBlock<float> block(ps, "sc", {8, 2, 3}, true);
  Rng rng(2);
  const auto x = random_tensor({8, 5, 7}, rng).cast<float>();
  const auto y = block(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(ScBlock, ShapePreservedAndChannelMismatch) {
  ParamStore<float> ps(3);
  ScBlock<float> block(ps, "sc", {4, 2, 3});
  Rng rng(4);
  for (auto [h, w] : {std::pair{1, 1}, {3, 9}, {16, 4}}) {
    EXPECT_EQ(block(random_tensor({4, h, w}, rng).cast<float>()).shape(), (Shape{4, h, w}));
  }
  EXPECT_THROW(block(random_tensor({5, 4, 4}, rng).cast<float>()), DimensionError);
  EXPECT_THROW(ScBlock<float>(ps, "bad", {4, 2, 4}), ConfigError);
}

TEST(ScBlock, MatchesPrimitiveComposition) {
  ParamStore<double> ps(5);
  ScBlock<double> block(ps, "sc", {3, 2, 3});
  Rng rng(6);
  const auto x = random_tensor({3, 6, 5}, rng);
  const auto y = block(x);
  const auto hdn = ops::gelu(ops::conv2d(x, block.fc1.weight, block.fc1.bias, {1, 0}));
  const auto y1 = ops::add(x, ops::conv2d(hdn, block.fc2.weight, block.fc2.bias, {1, 0}));
  const auto ref = ops::add(y1, ops::depthwise_conv2d(y1, block.dw.weight, block.dw.bias));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(ScBackbone, OutputShape) {
  ScBackboneConfig cfg;
  cfg.in_channels = 128;
  cfg.width1 = 128;
  cfg.width2 = 128;
  cfg.n0 = 1;
  cfg.n1 = 1;
  cfg.n2 = 1;
  ParamStore<float> ps(8);
  ScBackbone<float> net(ps, "sc2d", cfg);
  const auto y = net(Tensor<float>::zeros({128, 16, 16}), true);
  EXPECT_EQ(y.shape(), (Shape{256, 16, 16}));
  EXPECT_THROW(net(Tensor<float>::zeros({128, 15, 16}), true), ConfigError);
  EXPECT_THROW(net(Tensor<float>::zeros({64, 16, 16}), true), DimensionError);
}

TEST(ScBackbone, ZeroInputGivesConstantInterior) {
  ScBackboneConfig cfg{4, 6, 8, 2, 1, 1, 2, true, false};
  ParamStore<double> ps(9);
  ScBackbone<double> net(ps, "sc2d", cfg);
  const int h = 16, w = 16;
  const auto y = net(Tensor<double>::zeros({4, h, w}), true);
  // Zero padding of the depthwise convs only disturbs a band near the border.
  for (int c = 0; c < y.dim(0); ++c) {
    const double ref = y[(c * h + 4) * w + 4];
    for (int i = 4; i < 12; ++i)
      for (int j = 4; j < 12; ++j) ASSERT_NEAR(y[(c * h + i) * w + j], ref, 1e-12) << c;
  }
}

TEST(ScBackbone, ZeroInitSet1IsIdentityOnStemOutput) {
  ScBackboneConfig with{3, 4, 4, 2, 3, 1, 2, true, true};
  ScBackboneConfig without = with;
  without.n1 = 0;
  ParamStore<double> pa(10), pb(10);
  ScBackbone<double> a(pa, "sc2d", with), b(pb, "sc2d", without);
  Rng rng(11);
  const auto x = random_tensor({3, 8, 8}, rng);
  const auto ya = a(x, true), yb = b(x, true);
  // The first width1 channels are set 1's output; the stem is registered first.
  for (std::size_t i = 0; i < 4u * 64u; ++i) ASSERT_EQ(ya[i], yb[i]);
}

TEST(CostModel, Conv3x3SingleChannel) {
  const auto c = count_cost("conv3x3", 1);
  EXPECT_EQ(c.params, 10);
  EXPECT_EQ(c.macs_per_pos, 9);
}

TEST(CostModel, ScBlockClosedForms) {
  for (long c : {8L, 32L, 128L}) {
    const auto sc = count_cost("sc_block", static_cast<int>(c));
    EXPECT_EQ(sc.params, (2 * c * c + 2 * c) + (2 * c * c + c) + (9 * c + c));
    EXPECT_EQ(sc.macs_per_pos, 4 * c * c + 9 * c);
    const auto conv = count_cost("conv3x3", static_cast<int>(c));
    EXPECT_EQ(conv.params, 9 * c * c + c);
    EXPECT_EQ(conv.macs_per_pos, 9 * c * c);
  }
  EXPECT_THROW(count_cost("conv5x5", 8), ContractError);
}

TEST(CostModel, FlopReductionAt128) {
  const double red = reduction_percent(count_cost("sc_block", 128).macs_per_pos,
                                       count_cost("conv3x3", 128).macs_per_pos);
  EXPECT_NEAR(red, 100.0 * (1.0 - (4.0 * 128 * 128 + 9 * 128) / (9.0 * 128 * 128)), 1e-12);
  EXPECT_NEAR(red, 54.77, 0.01);
  EXPECT_NEAR(red, 54.8, 1.0);
  const double pred = reduction_percent(count_cost("sc_block", 128).params, count_cost("conv3x3", 128).params);
  EXPECT_NEAR(pred, 54.6, 1.0);
}

TEST(CostModel, ReductionIsFiveNinthsMinusInverseWidthAndIncreasing) {
  double prev = -1e9;
  for (int c = 8; c <= 512; ++c) {
    const double red = 1.0 - static_cast<double>(count_cost("sc_block", c).macs_per_pos) /
                                 static_cast<double>(count_cost("conv3x3", c).macs_per_pos);
    EXPECT_NEAR(red, 5.0 / 9.0 - 1.0 / c, 1e-12);
    EXPECT_GT(red, prev);
    prev = red;
  }
}

TEST(CostModel, InstantiatedBlockMatchesCount) {
  for (int c : {4, 16, 48}) {
    ParamStore<float> ps(1);
    ScBlock<float> block(ps, "sc", {c, 2, 3});
    EXPECT_EQ(static_cast<long>(ps.weight_count()), count_cost("sc_block", c).params);
    ParamStore<float> pc(1);
    Conv2d<float> conv(pc, "conv", c, c, 3);
    EXPECT_EQ(static_cast<long>(pc.weight_count()), count_cost("conv3x3", c).params);
  }
}

TEST(CostModel, BackboneCountIsSumOfLayers) {
  for (bool use_sc : {true, false}) {
    ScBackboneConfig cfg{10, 16, 24, 2, 3, 4, 2, use_sc, false};
    ParamStore<float> ps(2);
    ScBackbone<float> net(ps, "sc2d", cfg);
    long total = 0;
    for (const auto& l : describe_backbone(cfg)) total += count_cost(l).params;
    EXPECT_EQ(static_cast<long>(ps.weight_count()), total);
  }
}
