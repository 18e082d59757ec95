// End-to-end runs of the vlmprobe executable.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "vlmprobe/trace_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;  // stdout
  std::string err;  // stderr
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::current_path() / "cli_work" / info->name();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  RunResult run(const std::string& args) const {
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = std::string("'") + VLMPROBE_CLI + "' " + args + " 2>'" + err.string() + "'";
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
  }

  std::string q(const std::string& name) const { return "'" + path(name).string() + "'"; }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, HelpExitsZero) {
  const RunResult r = run("--help");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("gen2ds"), std::string::npos);
  EXPECT_EQ(run("probe cmb --help").exit_code, 0);
}

TEST_F(CliTest, UnknownFlagGivesUsageErrorJson) {
  const RunResult r = run("verify appendix-a --seed 1 --bogus");
  EXPECT_EQ(r.exit_code, 2);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"]["kind"], "usage");
  EXPECT_TRUE(r.out.empty());
}

TEST_F(CliTest, MissingSeedIsUsageError) {
  const RunResult r = run("gen2ds --out " + q("d"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(json::parse(r.err)["error"]["message"].get<std::string>().find("--seed"),
            std::string::npos);
}

TEST_F(CliTest, MissingTraceIsIoError) {
  const RunResult r = run("probe cmb --trace " + q("absent.atrc") + " --report " + q("x.csv"));
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["kind"], "io");
  EXPECT_FALSE(fs::exists(path("x.csv")));
}

TEST_F(CliTest, CorruptTraceIsFormatError) {
  std::ofstream(path("bad.atrc")) << "not a trace";
  const RunResult r = run("probe share --trace " + q("bad.atrc") + " --report " + q("x.csv"));
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["kind"], "format");
}

TEST_F(CliTest, Gen2dsIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run("gen2ds --seed 1 --out " + q("a")).exit_code, 0);
  ASSERT_EQ(run("gen2ds --seed 1 --out " + q("b")).exit_code, 0);
  for (const auto& entry : fs::recursive_directory_iterator(path("a"))) {
    if (!entry.is_regular_file()) continue;
    const fs::path twin = path("b") / fs::relative(entry.path(), path("a"));
    ASSERT_TRUE(fs::exists(twin)) << twin;
    EXPECT_EQ(slurp(entry.path()), slurp(twin)) << entry.path();
  }
  const json manifest = json::parse(slurp(path("a") / "manifest.json"));
  EXPECT_EQ(manifest["scenes"].size(), 500u);
}

TEST_F(CliTest, Gen2dsThenEvalWithGoldAnswersScoresFull) {
  ASSERT_EQ(run("gen2ds --seed 4 --scenes-per-category 5 --out " + q("d")).exit_code, 0);
  std::ifstream questions(path("d") / "questions.jsonl");
  std::ofstream pred(path("pred.jsonl"));
  std::string line;
  while (std::getline(questions, line)) {
    const json qj = json::parse(line);
    pred << json{{"id", qj["id"]}, {"answer", qj["gold"]}}.dump() << "\n";
  }
  pred.close();
  const RunResult r = run("eval2ds --pred " + q("pred.jsonl") + " --manifest " +
                          q("d/manifest.json") + " --report " + q("ev.json"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const json ev = json::parse(slurp(path("ev.json")));
  EXPECT_DOUBLE_EQ(ev["meta"]["accuracy"].get<double>(), 1.0);
  EXPECT_EQ(ev["rows"].size(), 7u);
}

TEST_F(CliTest, PsiOfIdenticalReportsIsZero) {
  std::ofstream(path("a.json")) << R"({"accuracy": 0.7})";
  const RunResult r = run("probe psi --orig " + q("a.json") + " --perm " + q("a.json"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("PSI 0\n"), std::string::npos);
}

TEST_F(CliTest, PsiFromAccuraciesWritesReport) {
  const RunResult r = run("probe psi --acc-orig 0.8 --acc-perm 0.6 --report " + q("psi.csv"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(slurp(path("psi.csv")), "acc_original,acc_permuted,psi\n0.8,0.6,0.25\n");
}

TEST_F(CliTest, PsiRejectsZeroOriginalAccuracy) {
  const RunResult r = run("probe psi --acc-orig 0 --acc-perm 0");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["kind"], "precondition");
}

TEST_F(CliTest, VerifyDerivativeChecksPass) {
  const RunResult r = run("verify appendix-a --trials 200 --seed 1 --report " + q("v.json"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const json v = json::parse(slurp(path("v.json")));
  for (const auto& row : v["rows"]) {
    const std::string status = row[4].get<std::string>();
    EXPECT_TRUE(status == "pass" || status.empty()) << row.dump();
  }
}

TEST_F(CliTest, ToyRunTraceFeedsEveryProbe) {
  RunResult r = run("toy run --seed 2 --trace " + q("t.atrc"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const vlmprobe::TraceBundle b = vlmprobe::read_trace(path("t.atrc"));
  EXPECT_EQ(b.trace.layers, 6u);
  EXPECT_EQ(b.hidden_states.size(), 7u);

  r = run("probe cmb --trace " + q("t.atrc") + " --report " + q("cmb.csv"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::istringstream cmb(slurp(path("cmb.csv")));
  std::size_t lines = 0;
  for (std::string l; std::getline(cmb, l);) ++lines;
  EXPECT_EQ(lines, 1u + 6u * 4u);

  for (const char* probe : {"share", "rope", "entropy", "norms"}) {
    r = run(std::string("probe ") + probe + " --trace " + q("t.atrc") + " --report " +
            q(std::string(probe) + ".json"));
    ASSERT_EQ(r.exit_code, 0) << probe << ": " << r.err;
    EXPECT_TRUE(json::accept(slurp(path(std::string(probe) + ".json")))) << probe;
  }
}

TEST_F(CliTest, ToyEvalPermutationDropsPositionalAccuracy) {
  ASSERT_EQ(run("toy eval --seed 3 --questions 60 --pipeline positional --report " + q("a.json"))
                .exit_code,
            0);
  ASSERT_EQ(run("toy eval --seed 3 --questions 60 --pipeline positional --permute-seed 5 --report " +
                q("b.json"))
                .exit_code,
            0);
  const RunResult r = run("probe psi --orig " + q("a.json") + " --perm " + q("b.json"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const double a = json::parse(slurp(path("a.json")))["meta"]["accuracy"].get<double>();
  const double b = json::parse(slurp(path("b.json")))["meta"]["accuracy"].get<double>();
  EXPECT_DOUBLE_EQ(a, 1.0);
  EXPECT_LT(b, 0.9);
}

TEST_F(CliTest, InterveneRoundTripsCsv) {
  std::ofstream(path("e.csv")) << "1,2\n3,4\n5,6\n7,8\n9,10\n";
  RunResult r = run("intervene normalize --in " + q("e.csv") +
                    " --partition 0,4,1 --target-rms 1 --out " + q("n.csv"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::istringstream n(slurp(path("n.csv")));
  std::string last;
  for (std::string l; std::getline(n, l);) last = l;
  EXPECT_EQ(last, "9,10");  // text rows untouched

  std::ofstream(path("g.csv")) << "1\n2\n3\n4\n";
  r = run("intervene compress --in " + q("g.csv") + " --target 1 --out " + q("c.csv"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(slurp(path("c.csv")), "2.5\n");

  r = run("intervene compress --in " + q("e.csv") + " --target 1 --out " + q("c.csv"));
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["kind"], "invalid_argument");
}
