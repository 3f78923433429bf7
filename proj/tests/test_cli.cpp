#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "tttflow/fileio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using tttflow::read_file;
using tttflow::sha256_hex;
using tttflow::write_file_atomic;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  static fs::path dir_;

  static Result run(const std::string& args) {
    const fs::path out = dir_ / "stdout.txt";
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = std::string(TTTFLOW_CLI) + " -c " + (dir_ / "cfg.json").string() + " " +
                            args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(out);
    r.err = read_file(err);
    return r;
  }

  // The last JSON line on stderr.
  static json last_log(const Result& r) {
    std::istringstream in(r.err);
    std::string line, last;
    while (std::getline(in, line)) {
      if (!line.empty()) last = line;
    }
    return json::parse(last);
  }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }

  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "tttflow_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const json cfg = {
        {"seed", 2},
        {"data", {{"num_classes", 3}, {"input_dim", 6}, {"n_train", 600}, {"n_test", 120}}},
        {"backbone", {{"widths", {8, 6, 6}}}},
        {"flow", {{"hidden", 16}}},
        {"train",
         {{"classifier", {{"epochs", 3}, {"milestones", {2}}}}, {"flow", {{"epochs", 2}}}}},
        {"adapt", {{"iterations", 2}, {"batch_size", 40}}},
        {"bench",
         {{"corruptions", {"gaussian_noise", "mean_shift"}},
          {"severities", {1, 5}},
          {"iterations", {0, 1}},
          {"seeds", {0, 1}}}}};
    write_file_atomic(dir_ / "cfg.json", cfg.dump(2));
    ASSERT_EQ(run("gen-data -o " + p("data")).code, 0);
    ASSERT_EQ(run("train-source -d " + p("data/simplex_train_s0_2.csv") + " -o " + p("b.ckpt")).code, 0);
    ASSERT_EQ(run("train-flow -b " + p("b.ckpt") + " -d " + p("data/simplex_train_s0_2.csv") +
                  " -o " + p("f.ckpt") + " --out-backbone " + p("b2.ckpt"))
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, GenDataWritesEveryFile) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "data")) {
    EXPECT_EQ(e.path().extension(), ".csv");
    ++n;
  }
  EXPECT_EQ(n, 3u + 6u * 5u);
  EXPECT_TRUE(fs::exists(dir_ / "data" / "simplex_gaussian_noise_s5_2.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "data" / "simplex_natural_s0_2.csv"));
}

TEST_F(CliTest, TrainFlowIsReproducible) {
  ASSERT_EQ(run("train-flow -b " + p("b.ckpt") + " -d " + p("data/simplex_train_s0_2.csv") + " -o " +
                p("f_again.ckpt") + " --out-backbone " + p("b2_again.ckpt"))
                .code,
            0);
  EXPECT_EQ(sha256_hex(read_file(dir_ / "f.ckpt")), sha256_hex(read_file(dir_ / "f_again.ckpt")));
  EXPECT_EQ(sha256_hex(read_file(dir_ / "b2.ckpt")), sha256_hex(read_file(dir_ / "b2_again.ckpt")));
}

TEST_F(CliTest, ZeroIterationsReproducesTheBaseline) {
  const Result r = run("--set adapt.iterations=0 adapt-eval -b " + p("b2.ckpt") + " -f " +
                       p("f.ckpt") + " -t " + p("data/simplex_gaussian_noise_s5_2.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json out = json::parse(r.out);
  EXPECT_EQ(out.at("accuracy"), out.at("baseline_accuracy"));
  EXPECT_EQ(out.at("shift_score_pre"), out.at("shift_score_post"));
  EXPECT_EQ(out.at("samples"), 120);
}

TEST_F(CliTest, AdaptEvalWritesBatchLogAndKeepsInputs) {
  const std::vector<std::string> inputs{"b2.ckpt", "f.ckpt", "data/simplex_mean_shift_s3_2.csv",
                                        "cfg.json"};
  std::vector<std::string> before;
  for (const auto& f : inputs) before.push_back(sha256_hex(read_file(dir_ / f)));
  const Result r = run("adapt-eval -b " + p("b2.ckpt") + " -f " + p("f.ckpt") + " -t " +
                       p("data/simplex_mean_shift_s3_2.csv") + " --batch-log " + p("batches.jsonl"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    EXPECT_EQ(sha256_hex(read_file(dir_ / inputs[i])), before[i]) << inputs[i];
  }
  std::istringstream log(read_file(dir_ / "batches.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    EXPECT_TRUE(json::parse(line).contains("nll_before"));
    ++lines;
  }
  EXPECT_EQ(lines, 3u);  // 120 samples in batches of 40
}

TEST_F(CliTest, RefusesToOverwriteAnInput) {
  const fs::path data = dir_ / "data" / "simplex_train_s0_2.csv";
  const std::string before = sha256_hex(read_file(data));
  const Result r = run("train-source -d " + data.string() + " -o " + data.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_log(r).at("error"), "usage");
  EXPECT_EQ(sha256_hex(read_file(data)), before);
  const Result r2 = run("train-flow -b " + p("b.ckpt") + " -d " + data.string() + " -o " +
                        p("f3.ckpt") + " --out-backbone " + p("b.ckpt"));
  EXPECT_EQ(r2.code, 1);
}

TEST_F(CliTest, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("train-source --bogus").code, 1);
  const Result r = run("train-flow -b " + p("b.ckpt") + " -d " + p("data/simplex_train_s0_2.csv") +
                       " -o " + p("f4.ckpt"));
  EXPECT_EQ(r.code, 1);  // --out-backbone required while BN stats are refreshed
  EXPECT_FALSE(fs::exists(dir_ / "f4.ckpt"));
  const Result c = run("--set adapt.lr=-1 --set nope=3 --print-config");
  EXPECT_EQ(c.code, 1);
  const json e = last_log(c);
  EXPECT_EQ(e.at("error"), "config");
  EXPECT_EQ(e.at("exit_code"), 1);
  EXPECT_EQ(e.at("problems").size(), 2u);
}

TEST_F(CliTest, RuntimeErrorsExitWithTwo) {
  const Result missing =
      run("adapt-eval -b " + p("nothing.ckpt") + " -f " + p("f.ckpt") + " -t " + p("data/simplex_clean_s0_2.csv"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_EQ(last_log(missing).at("level"), "error");

  std::string bytes = read_file(dir_ / "f.ckpt");
  bytes[bytes.size() - 5] = static_cast<char>(bytes[bytes.size() - 5] ^ 0x10);
  write_file_atomic(dir_ / "tampered.ckpt", bytes);
  const Result t =
      run("adapt-eval -b " + p("b2.ckpt") + " -f " + p("tampered.ckpt") + " -t " + p("data/simplex_clean_s0_2.csv"));
  EXPECT_EQ(t.code, 2);
  EXPECT_EQ(last_log(t).at("error"), "checkpoint");

  write_file_atomic(dir_ / "bad.csv", "label,f0,f1,f2,f3,f4,f5\n0,1,2,3,4,5,6\n1,1,2,oops,4,5,6\n");
  const Result d = run("adapt-eval -b " + p("b2.ckpt") + " -f " + p("f.ckpt") + " -t " + p("bad.csv"));
  EXPECT_EQ(d.code, 2);
  EXPECT_EQ(last_log(d).at("error"), "data");
  EXPECT_EQ(last_log(d).at("line"), 3);
}

TEST_F(CliTest, BenchAndProjectProduceReports) {
  const Result b = run("bench -b " + p("b2.ckpt") + " -f " + p("f.ckpt") + " -o " + p("bench.csv") +
                       " --table " + p("bench.txt") + " --curve-out " + p("curve.csv") +
                       " --curve-iters 3");
  ASSERT_EQ(b.code, 0) << b.err;
  const std::string csv = read_file(dir_ / "bench.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 1u + 2u * 2u * 2u * 2u);
  EXPECT_NE(read_file(dir_ / "bench.txt").find("best"), std::string::npos);
  const std::string curve = read_file(dir_ / "curve.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(curve.begin(), curve.end(), '\n')), 1u + 2u * 4u);

  const Result pr = run("project -b " + p("b2.ckpt") + " -f " + p("f.ckpt") + " -d " +
                        p("data/simplex_clean_s0_2.csv") + " -d " +
                        p("data/simplex_gaussian_noise_s5_2.csv") + " -o " + p("proj.csv"));
  ASSERT_EQ(pr.code, 0) << pr.err;
  const std::string proj = read_file(dir_ / "proj.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(proj.begin(), proj.end(), '\n')), 1u + 240u);
}

TEST_F(CliTest, PrintConfigShowsResolvedValues) {
  const Result r = run("--set adapt.iterations=7 --print-config");
  ASSERT_EQ(r.code, 0);
  const json cfg = json::parse(r.out);
  EXPECT_EQ(cfg.at("adapt").at("iterations"), 7);
  EXPECT_EQ(cfg.at("seed"), 2);
}
