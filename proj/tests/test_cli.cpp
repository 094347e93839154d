#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "aop/config.hpp"
#include "aop/tensor_io.hpp"
#include "fixtures.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("aop_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunResult run_cli(const std::string& args) {
  const auto err_path = fs::temp_directory_path() / "aop_cli_stderr.txt";
  const std::string cmd = std::string(AOPNET_CLI_PATH) + " " + args + " 2>" + err_path.string();
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_path);
  r.err.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

/// Writes the thin test configuration to `dir/tiny.cfg`.
std::string tiny_config_file(const fs::path& dir, int steps) {
  auto cfg = aop::testing::tiny_config();
  cfg.steps = steps;
  const auto path = (dir / "tiny.cfg").string();
  aop::write_file(path, aop::config_to_text(cfg));
  return path;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::map<std::string, std::string> metrics_of(const std::string& path) {
  std::map<std::string, std::string> m;
  for (const auto& r : csv_rows(aop::read_file(path)))
    if (r.size() == 3) m[r[0] + "/" + r[1]] = r[2];
  return m;
}

/// name -> "kind shape" for every non-optimizer manifest line.
std::map<std::string, std::string> model_manifest(const std::string& path) {
  std::map<std::string, std::string> m;
  std::istringstream in(aop::read_file(path));
  std::string name, kind, shape;
  while (in >> name >> kind >> shape)
    if (name.rfind("optimizer.", 0) != 0) m[name] = kind + " " + shape;
  return m;
}

bool one_line_error(const std::string& err, const std::string& kind) {
  return err.rfind("error: " + kind + ":", 0) == 0 && err.find('\n') == err.size() - 1;
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

}  // namespace

TEST(Cli, GenZeroScenesWritesManifestOnly) {
  const auto dir = scratch("gen0");
  const auto r = run_cli("gen -o " + (dir / "ds").string() + " -n 0");
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir / "ds")) files.push_back(e.path().filename().string());
  ASSERT_EQ(files, std::vector<std::string>{"manifest.txt"});
  EXPECT_NE(aop::read_file((dir / "ds/manifest.txt").string()).find("scenes 0"), std::string::npos);
}

TEST(Cli, GenIsByteIdenticalForTheSameSeed) {
  const auto dir = scratch("genidem");
  const auto cfg = tiny_config_file(dir, 1);
  ASSERT_EQ(run_cli("gen -c " + cfg + " -o " + (dir / "a").string() + " -n 3").code, 0);
  ASSERT_EQ(run_cli("gen -c " + cfg + " -o " + (dir / "b").string() + " -n 3 -j 3").code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    const auto other = dir / "b" / e.path().filename();
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(aop::read_file(e.path().string()), aop::read_file(other.string())) << e.path();
  }
  EXPECT_EQ(files, 1u + 3u * 3u);
  EXPECT_NE(aop::read_file((dir / "a/manifest.txt").string()).find("scenes 3"), std::string::npos);
}

TEST(Cli, GenUnwritablePathIsAnIoErrorNamingThePath) {
  const auto dir = scratch("genbad");
  aop::write_file((dir / "blocker").string(), "x");
  const auto target = (dir / "blocker" / "ds").string();
  const auto r = run_cli("gen -o " + target + " -n 1");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(one_line_error(r.err, "io")) << r.err;
  EXPECT_NE(r.err.find(target), std::string::npos) << r.err;
}

TEST(Cli, UnknownConfigKeyFailsWithOneLine) {
  const auto dir = scratch("badkey");
  const auto r = run_cli("gen -o " + (dir / "ds").string() + " -s model.nonsense=3");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(one_line_error(r.err, "config")) << r.err;
}

TEST(Cli, FlopsRowsMatchClosedFormsAndTotalsSum) {
  const auto r = run_cli("flops -w 8,16,128");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.front(), (std::vector<std::string>{"layer", "params", "macs_per_pos", "reduction_vs_conv"}));
  long params = 0, macs = 0, base = 0;
  std::map<std::string, std::vector<std::string>> by_layer;
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    by_layer[rows[i][0]] = rows[i];
    params += std::stol(rows[i][1]);
    macs += std::stol(rows[i][2]);
    if (starts_with(rows[i][0], "conv3x3@")) base += 3 * std::stol(rows[i][2]);
  }
  EXPECT_EQ(rows.size(), 1u + 9u + 1u);
  const auto& total = rows.back();
  ASSERT_EQ(total[0], "total");
  EXPECT_EQ(std::stol(total[1]), params);
  EXPECT_EQ(std::stol(total[2]), macs);
  EXPECT_NEAR(std::stod(total[3]), 100.0 * (1.0 - static_cast<double>(macs) / base), 1e-4);

  EXPECT_NEAR(std::stod(by_layer.at("sc_block@128")[3]), 54.8, 0.05);
  EXPECT_NEAR(std::stod(by_layer.at("sc_block@8")[3]), 100.0 * (5.0 / 9.0 - 1.0 / 8.0), 1e-4);
  EXPECT_NEAR(std::stod(by_layer.at("conv3x3@16")[3]), 0.0, 1e-12);
}

TEST(Cli, FlopsBackboneTotalsSumLayers) {
  const auto r = run_cli("flops --backbone --memory");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_GE(rows.size(), 3u);
  long params = 0, macs = 0, acts = 0;
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    params += std::stol(rows[i][1]);
    macs += std::stol(rows[i][2]);
    acts += std::stol(rows[i][4]);
  }
  EXPECT_EQ(std::stol(rows.back()[1]), params);
  EXPECT_EQ(std::stol(rows.back()[2]), macs);
  EXPECT_EQ(std::stol(rows.back()[4]), acts);
}

TEST(Cli, EvalGroundTruthScoresPerfectly) {
  const auto dir = scratch("evalgt");
  const auto cfg = tiny_config_file(dir, 1);
  ASSERT_EQ(run_cli("gen -c " + cfg + " -o " + (dir / "ds").string() + " -n 2").code, 0);
  const auto out = (dir / "metrics.csv").string();
  const auto r = run_cli("eval -c " + cfg + " -d " + (dir / "ds").string() + " --ground-truth -o " + out);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = metrics_of(out);
  EXPECT_EQ(m.at("PQ/all"), "100.000000");
  EXPECT_EQ(m.at("mAP/all"), "1.000000");
}

TEST(Cli, EvalOnEmptyDatasetFails) {
  const auto dir = scratch("evalempty");
  ASSERT_EQ(run_cli("gen -o " + (dir / "ds").string() + " -n 0").code, 0);
  const auto r = run_cli("eval -d " + (dir / "ds").string() + " --ground-truth -o " + (dir / "m.csv").string());
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(one_line_error(r.err, "config")) << r.err;
}

TEST(Cli, AblationFlagsChangeTheManifestAccordingly) {
  const auto dir = scratch("ablate");
  const auto cfg = tiny_config_file(dir, 0);
  const auto cw = aop::testing::tiny_config().code_width;
  ASSERT_EQ(run_cli("gen -c " + cfg + " -o " + (dir / "ds").string() + " -n 1").code, 0);
  std::map<std::string, std::map<std::string, std::string>> man;
  for (const std::string flag : {"", "--no-ifr", "--no-dual-task", "--no-sc"}) {
    const auto ck = (dir / ("m" + flag + ".aopt")).string();
    const auto r = run_cli("train -q -c " + cfg + " -d " + (dir / "ds").string() + " -o " + ck + " " + flag);
    ASSERT_EQ(r.code, 0) << flag << ": " << r.err;
    man[flag] = model_manifest(ck + ".manifest");
  }
  const auto& base = man[""];

  // --no-ifr: every ifr entry disappears and the head input loses the 4m code channels.
  auto expect = base;
  std::erase_if(expect, [](const auto& kv) { return starts_with(kv.first, "ifr."); });
  auto& trunk = expect.at("detect.trunk.conv.weight");
  const auto x1 = trunk.find('x'), x2 = trunk.find('x', x1 + 1);
  const int in = std::stoi(trunk.substr(x1 + 1, x2 - x1 - 1));
  trunk = trunk.substr(0, x1 + 1) + std::to_string(in - 4 * cw) + trunk.substr(x2);
  EXPECT_EQ(man["--no-ifr"], expect);

  // --no-dual-task: the pyramid compress and CBAM fusion layers disappear.
  expect = base;
  std::erase_if(expect, [](const auto& kv) {
    return starts_with(kv.first, "panoptic.compress") || starts_with(kv.first, "panoptic.cbam");
  });
  EXPECT_EQ(man["--no-dual-task"], expect);

  // --no-sc: only the 2D backbone block sets change, and they become conv + BN blocks.
  auto strip_sets = [](std::map<std::string, std::string> m) {
    std::erase_if(m, [](const auto& kv) { return starts_with(kv.first, "sc2d.set"); });
    return m;
  };
  EXPECT_EQ(strip_sets(man["--no-sc"]), strip_sets(base));
  std::size_t conv = 0;
  for (const auto& [name, v] : man["--no-sc"]) {
    if (!starts_with(name, "sc2d.set")) continue;
    EXPECT_EQ(name.find(".fc1."), std::string::npos) << name;
    conv += name.find(".conv.weight") != std::string::npos;
  }
  const auto t = aop::testing::tiny_config();
  EXPECT_EQ(conv, static_cast<std::size_t>(t.sc_n1 + t.sc_n2));
}

TEST(Cli, TrainEvalInferRoundTrip) {
  const auto dir = scratch("pipeline");
  const auto cfg = tiny_config_file(dir, 3);
  const auto ds = (dir / "ds").string(), ck = (dir / "model.aopt").string();
  ASSERT_EQ(run_cli("gen -c " + cfg + " -o " + ds + " -n 2").code, 0);
  auto r = run_cli("train -q -c " + cfg + " -d " + ds + " -o " + ck);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = csv_rows(aop::read_file((dir / "training_log.csv").string()));
  ASSERT_EQ(log.size(), 1u + 3u);
  EXPECT_EQ(log[0][0], "step");

  r = run_cli("eval -c " + cfg + " -m " + ck + " -d " + ds + " -o " + (dir / "m.csv").string() + " --dump-dir " +
              (dir / "dump").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(metrics_of((dir / "m.csv").string()).count("PQ/all"));
  EXPECT_TRUE(fs::exists(dir / "dump/scene_0000_heatmap.pgm"));
  EXPECT_TRUE(fs::exists(dir / "dump/detections.csv"));

  r = run_cli("infer -c " + cfg + " -m " + ck + " -o " + (dir / "inf").string() + " " + ds + "/scene_0001.aopc");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "inf/scene_0001.labels"));
  EXPECT_TRUE(fs::exists(dir / "inf/scene_0001_bev_instances.pgm"));

  r = run_cli("eval -c " + cfg + " --no-ifr -m " + ck + " -d " + ds);
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(one_line_error(r.err, "config")) << r.err;
  EXPECT_NE(r.err.find("incompatible"), std::string::npos) << r.err;
}
