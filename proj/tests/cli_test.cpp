#include "support.hpp"

#include "uso/run.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
};

Result uso_cli(const std::string& args) {
  const std::string cmd = std::string(USO_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, "popen failed"};
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string hash_line(const std::string& out) {
  const auto at = out.find(" hash ");
  return at == std::string::npos ? "" : out.substr(at);
}

}  // namespace

TEST(Cli, BuildDataTwiceGivesTheSameManifest) {
  const auto dir = uso::testing::scratch_dir("cli_data");
  std::ofstream(dir / "c.cfg") << "data.preserved = 6\ndata.shifted = 6\n";
  const auto a = uso_cli("build-data --config " + (dir / "c.cfg").string() + " --seed 4 --out " + (dir / "a").string());
  const auto b = uso_cli("build-data --config " + (dir / "c.cfg").string() + " --seed 4 --out " + (dir / "b").string());
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_FALSE(hash_line(a.out).empty());
  EXPECT_EQ(hash_line(a.out), hash_line(b.out));
  EXPECT_EQ(slurp(dir / "a" / "manifest.jsonl"), slurp(dir / "b" / "manifest.jsonl"));
  EXPECT_NE(slurp(dir / "a" / "config.snapshot").find("data.preserved = 6"), std::string::npos);
  const auto c = uso_cli("build-data --config " + (dir / "c.cfg").string() + " --seed 5 --out " + (dir / "c").string());
  EXPECT_NE(hash_line(a.out), hash_line(c.out));
  fs::remove_all(dir);
}

TEST(Cli, RunRootResolvesRelativeOutputs) {
  const auto dir = uso::testing::scratch_dir("cli_root");
  const std::string cmd = "USO_RUN_ROOT=" + dir.string() + " " + std::string(USO_CLI_PATH) +
                          " build-data --set data.preserved=2 --set data.shifted=2 --out rel > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "rel" / "manifest.jsonl"));
  fs::remove_all(dir);
}

TEST(Cli, ErrorsAreOneMachineParsableLine) {
  const auto bad = uso_cli("frobnicate");
  EXPECT_NE(bad.code, 0);
  const auto dir = uso::testing::scratch_dir("cli_err");
  std::ofstream(dir / "c.cfg") << "stage1.colour = blue\n";
  const auto unknown = uso_cli("build-data --config " + (dir / "c.cfg").string() + " --out " + (dir / "o").string());
  EXPECT_EQ(unknown.code, 2);
  EXPECT_EQ(unknown.out.rfind("error kind=config command=build-data", 0), 0u) << unknown.out;
  EXPECT_EQ(std::count(unknown.out.begin(), unknown.out.end(), '\n'), 1);

  std::ofstream(dir / "f.cfg") << "foundation = " << (dir / "nowhere").string() << "\n";
  const auto missing = uso_cli("ablate --config " + (dir / "f.cfg").string() + " --out " + (dir / "run").string());
  EXPECT_EQ(missing.code, 3);
  EXPECT_EQ(missing.out.rfind("error kind=missing_artifact command=ablate", 0), 0u) << missing.out;
  fs::remove_all(dir);
}

TEST(Cli, ReportConsolidatesRuns) {
  const auto dir = uso::testing::scratch_dir("cli_report");
  for (const std::string name : {"a", "b", "c"}) {
    fs::create_directories(dir / name);
    uso::eval::MetricReport r;
    r.variant = name == "a" ? "full" : "no_de";
    uso::eval::TaskReport t;
    t.cells.push_back({0, 0, 0, "preserved", 1, 0.5, 1.0, 0.9, 1.0, {}});
    r.tasks.push_back(t);
    std::ofstream(dir / name / "report.json") << uso::eval::to_json(r).dump();
  }
  const std::string runs = (dir / "a").string() + "," + (dir / "b").string() + "," + (dir / "c").string();
  const auto r = uso_cli("report --runs " + runs + " --out " + (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(dir / "out" / "summary.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(dir / "out" / "joint.svg"));
  const auto missing = uso_cli("report --runs " + (dir / "zzz").string() + " --out " + (dir / "out2").string());
  EXPECT_EQ(missing.code, 3);
  fs::remove_all(dir);
}

TEST(RunConfig, ResolvesStageKeysAndRejectsUnknownOnes) {
  uso::KeyValueConfig kv;
  kv.set("stage2.steps", "17");
  kv.set("stage2.optimizer", "adam");
  kv.set("stage2.task_mix", "1:0:3");
  kv.set("variant", "no_srl");
  const auto rc = uso::run::resolve(kv);
  EXPECT_EQ(rc.ablation.stage2.steps, 17);
  EXPECT_EQ(rc.ablation.stage2.optimizer, "adam");
  EXPECT_EQ(rc.ablation.stage2.task_mix, (std::array<int, 3>{1, 0, 3}));
  EXPECT_EQ(rc.variant, uso::train::Variant::no_srl);
  kv.set("stage2.t_e", "9");
  EXPECT_THROW(uso::run::resolve(kv), uso::ConfigError);
  uso::KeyValueConfig bad;
  bad.set("stage3.steps", "1");
  EXPECT_THROW(uso::run::resolve(bad), uso::ConfigError);
}

TEST(Cli, AblateNoSrlLogsZeroLambda) {
  USO_REQUIRE_FOUNDATION();
  const auto dir = uso::testing::scratch_dir("cli_ablate");
  std::ofstream(dir / "c.cfg") << "foundation = " << std::getenv("USO_FOUNDATION") << "\n"
                               << "data.preserved = 8\ndata.shifted = 8\n"
                               << "stage1.steps = 3\nstage1.batch = 2\nstage2.steps = 4\nstage2.batch = 2\n"
                               << "bench.samples_per_cell = 1\nbench.T_steps = 1\n";
  const auto r = uso_cli("ablate --config " + (dir / "c.cfg").string() + " --variant no_srl --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream log(dir / "run" / "log.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) {
    EXPECT_EQ(nlohmann::json::parse(line).at("lambda"), 0);
    ++rows;
  }
  EXPECT_EQ(rows, 7);
  EXPECT_TRUE(fs::exists(dir / "run" / "report.json"));
  const auto again = uso_cli("ablate --config " + (dir / "c.cfg").string() + " --variant no_srl --out " + (dir / "run").string());
  EXPECT_NE(again.out.find("complete"), std::string::npos);
  fs::remove_all(dir);
}
