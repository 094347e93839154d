#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "aop/config.hpp"
#include "aop/errors.hpp"

using namespace aop;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, DefaultsValidateAndMatchDeskSettings) {
  RunConfig c;
  EXPECT_NO_THROW(validate_config(c));
  EXPECT_EQ(c.k_s1, 16);
  EXPECT_EQ(c.k_s2, 25);
  EXPECT_EQ(c.sc_ratio, 2);
  EXPECT_EQ(c.vfe_ratio, 4);
  EXPECT_EQ(c.mlp_ratio, 4);
  EXPECT_EQ(c.grid.H, 128);
  EXPECT_EQ(c.grid.W, 128);
  EXPECT_EQ(c.grid.Z, 16);
}

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  const auto c = parse_config(
      "# a comment\n"
      "\n"
      "seed = 99\n"
      "model.k_s1=8   # trailing comment\n"
      "  optim.kind = sgd\n"
      "optim.lr = 0.05\n"
      "model.use_ifr = false\n");
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.k_s1, 8);
  EXPECT_EQ(c.optim.kind, "sgd");
  EXPECT_DOUBLE_EQ(c.optim.lr, 0.05);
  EXPECT_FALSE(c.use_ifr);
}

TEST(Config, UnknownKeyIsRejectedWithLineNumber) {
  const auto msg = error_of([] { parse_config("seed = 1\n\nmodel.k_s3 = 4\n"); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("model.k_s3"), std::string::npos) << msg;
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_NE(error_of([] { parse_config("model.c1 = 3.5\n"); }).find("line 1"), std::string::npos);
  EXPECT_THROW(parse_config("optim.lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("model.use_sc = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -4\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 4\n"), ConfigError);
}

TEST(Config, TextRoundTripPreservesEveryKey) {
  RunConfig c;
  c.seed = 123456789012345ull;
  c.optim.lr = 1.0 / 3.0;
  c.k_s2 = 9;
  c.use_sc = false;
  c.scene.noise_sigma = 0.0123;
  const auto back = parse_config(config_to_text(c));
  for (const auto& k : config_schema()) EXPECT_EQ(k.get(back), k.get(c)) << k.name;
  EXPECT_EQ(back.optim.lr, c.optim.lr);
  EXPECT_EQ(back.seed, c.seed);
}

TEST(Config, ValidationCatchesInconsistentSettings) {
  EXPECT_THROW(parse_config("grid.Z = 8\n"), ConfigError);
  EXPECT_THROW(parse_config("rv.width = 30\n"), ConfigError);
  EXPECT_THROW(parse_config("model.k_s1 = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("model.sc_n0 = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("optim.kind = rmsprop\n"), ConfigError);
  EXPECT_THROW(parse_config("optim.lr = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("loss.w_det = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("rv.fov_up = -40\n"), ConfigError);
}

TEST(Config, LoadConfigNamesThePath) {
  const auto path = (std::filesystem::temp_directory_path() / "aop_bad.cfg").string();
  std::ofstream(path) << "bogus = 1\n";
  const auto msg = error_of([&] { load_config(path); });
  EXPECT_NE(msg.find(path), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path), Error);
}
