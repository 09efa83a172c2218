#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "cunet/config.hpp"
#include "oracles.hpp"

using namespace cunet;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "cunet");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path temp_path(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cunet_cli_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::filesystem::path write_config(const std::string& name, const CUNetConfig& c) {
  const auto p = temp_path(name);
  save_config(c, p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

TEST(Cli, CountParamsMatchesClosedForm) {
  CUNetConfig c;
  c.m = 128;
  c.n = 32;
  c.depth = 4;
  const auto cfg = write_config("count.cfg", c);
  const CliRun r = run({"count-params", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("# resolved config"), std::string::npos);
  EXPECT_NE(r.out.find("total: " + std::to_string(oracle::cu_net_params(c)) + "\n"),
            std::string::npos)
      << r.out;
  EXPECT_NE(r.out.find("u1: " + std::to_string(oracle::unet_params(c, 1)) + "\n"),
            std::string::npos);
}

TEST(Cli, FlagsOverrideConfigKeys) {
  const auto cfg = write_config("override.cfg", CUNetConfig{});
  const CliRun r = run({"count-params", "--config", cfg.string(), "--u", "3", "--coupling", "false"});
  ASSERT_EQ(r.code, 0) << r.err;
  CUNetConfig c;
  c.unets = 3;
  c.coupling = false;
  EXPECT_NE(r.out.find("total: " + std::to_string(oracle::cu_net_params(c))), std::string::npos);
}

TEST(Cli, CountParamsDenseReportsCalibration) {
  const CliRun r = run({"count-params", "--arch", "dense"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("calibrated"), std::string::npos) << r.out;
}

TEST(Cli, InspectWritesDotWithCouplingEdges) {
  CUNetConfig c;
  c.unets = 3;
  c.depth = 2;
  const auto cfg = write_config("inspect.cfg", c);
  const auto dot = temp_path("graph.dot");
  const CliRun r = run({"inspect", "--config", cfg.string(), "--dot", dot.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("coupling_edges: 15\n"), std::string::npos) << r.out;
  const std::string text = slurp(dot);
  const std::regex edge("label=\"coupling\"");
  EXPECT_EQ(std::distance(std::sregex_iterator(text.begin(), text.end(), edge),
                          std::sregex_iterator()),
            15);
}

TEST(Cli, GradCheckTinyConfigPasses) {
  const CliRun r = run({"grad-check", "--tol", "1e-5"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("gradient check passed"), std::string::npos);
}

TEST(Cli, GradCheckFailureExitsTwo) {
  // Central differences in binary64 cannot get this close.
  const CliRun r = run({"grad-check", "--tol", "1e-12", "--samples", "3"});
  EXPECT_EQ(r.code, cli::kCheckFailed) << r.out << r.err;
}

TEST(Cli, GenDataThenEval) {
  const auto data = temp_path("data");
  CliRun r = run({"gen-data", "--out", data.string(), "--count", "10", "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(data / "manifest"));
  EXPECT_TRUE(std::filesystem::exists(data / "samples.bin"));

  const auto out = temp_path("train");
  r = run({"train", "--data", data.string(), "--out", out.string(), "--epochs", "0", "--m", "8",
           "--n", "4", "--depth", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = temp_path("eval.csv");
  r = run({"eval", "--checkpoint", (out / "checkpoint.bin").string(), "--data", data.string(),
           "--ref", "pck", "--alpha", "0.2", "--out", csv.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(csv);
  EXPECT_EQ(text.rfind("joint,correct,total,pck\n", 0), 0u);
  EXPECT_NE(text.find("\nALL,"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run({"count-params", "--bogus"}).code, cli::kUsage);
  EXPECT_EQ(run({"count-params", "--config", "/nonexistent/cfg"}).code, cli::kUsage);
  EXPECT_EQ(run({"count-params", "--m", "4", "--n", "8"}).code, cli::kUsage);
  EXPECT_EQ(run({"train", "--data", temp_path("nodata").string(), "--out",
                 temp_path("noout").string()})
                .code,
            cli::kRuntime);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
}

TEST(Cli, EveryCommandPrintsResolvedConfig) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"count-params"}, {"inspect", "--dot", temp_path("x.dot").string()}}) {
    const CliRun r = run(args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("# resolved config\n", 0), 0u) << r.out;
  }
}

}  // namespace
