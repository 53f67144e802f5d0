// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"
#include "textfuse/textfuse.hpp"

using namespace textfuse;
using textfuse::test::slurp;
using textfuse::test::spit;
using textfuse::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(const TempDir& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("TEXTFUSE_THREADS=1 '") + TEXTFUSE_CLI_PATH + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// One dataset and one briefly trained model shared by every test.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const Outcome g = run(*dir_, "gen --seed 5 --n 3 --size 32 --out '" + (*dir_ / "data").string() + "'");
    ASSERT_EQ(g.code, 0) << g.err;
    const Outcome t = run(*dir_, "train --data '" + (*dir_ / "data").string() + "' --out '" + (*dir_ / "run").string() +
                                 "' --epochs 1 --batch 3 --lr 1e-3 --seed 2");
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path p(const std::string& s) { return *dir_ / s; }
  static std::string q(const std::string& s) { return "'" + p(s).string() + "'"; }
  static std::string pair_args(const std::string& id) {
    return "--ckpt " + q("run/model.txf") + " --ir " + q("data/ir/" + id + ".pgm") + " --vis " +
           q("data/vis/" + id + ".pgm") + " --prompt @" + p("data/prompts/" + id + ".txt").string();
  }
  static TempDir* dir_;
};
TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, GenMatchesLibrary) {
  const auto lib = load_dataset(p("data"));
  ASSERT_EQ(lib.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    const SampleRecord r = render_sample(5, i, 32, 3).record;
    EXPECT_EQ(lib[i].ir.values, r.ir.values);
    EXPECT_EQ(lib[i].prompt, r.prompt);
  }
}

TEST_F(Cli, TrainWritesCheckpointAndLog) {
  EXPECT_NO_THROW(load_checkpoint(p("run/model.txf")));
  std::istringstream log(slurp(p("run/train_log.csv")));
  std::string header, row, extra;
  std::getline(log, header);
  std::getline(log, row);
  EXPECT_EQ(header, log_csv_header());
  EXPECT_EQ(row.substr(0, 2), "0,");
  EXPECT_FALSE(std::getline(log, extra));
}

TEST_F(Cli, FuseEqualsInProcessInference) {
  TempDir out;
  const Outcome r = run(out, "fuse " + pair_args("000001") + " --out '" + (out / "f.pgm").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("threads"), std::string::npos);
  const Checkpoint c = load_checkpoint(p("run/model.txf"));
  const auto data = load_dataset(p("data"));
  const Image want = quantize_8bit(infer(c, data[1].ir, data[1].vis, data[1].prompt).fused);
  EXPECT_EQ(read_pgm(out / "f.pgm").values, want.values);
  // Literal prompt text is equivalent to @file.
  const Outcome lit = run(out, "fuse --ckpt " + q("run/model.txf") + " --ir " + q("data/ir/000001.pgm") + " --vis " +
                               q("data/vis/000001.pgm") + " --prompt '" + data[1].prompt + "' --out '" +
                               (out / "g.pgm").string() + "'");
  ASSERT_EQ(lit.code, 0) << lit.err;
  EXPECT_EQ(slurp(out / "g.pgm"), slurp(out / "f.pgm"));
}

TEST_F(Cli, DetectWritesSixColumns) {
  TempDir out;
  const Outcome r = run(out, "detect " + pair_args("000000") + " --conf 0 --out '" + (out / "d.txt").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(out / "d.txt"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    int cls;
    double v[5];
    ASSERT_TRUE(ls >> cls >> v[0] >> v[1] >> v[2] >> v[3] >> v[4]) << line;
    EXPECT_GE(cls, 0);
    EXPECT_LT(cls, 3);
    ++lines;
  }
  EXPECT_GT(lines, 0u);
}

TEST_F(Cli, EvalReportAndFusedImages) {
  TempDir out;
  const Outcome r = run(out, "eval --ckpt " + q("run/model.txf") + " --data " + q("data") + " --report '" +
                             (out / "r.csv").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(out / "r.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "SF,EN,SD,AG,mAP,AP_person,AP_car,AP_bus");
  const EvalReport rep = evaluate(load_checkpoint(p("run/model.txf")), load_dataset(p("data")));
  EXPECT_EQ(csv, format_report_csv(rep));
  for (const char* id : {"000000", "000001", "000002"}) EXPECT_TRUE(fs::exists(out / "fused" / (std::string(id) + ".pgm")));
}

TEST_F(Cli, ExitCodes) {
  TempDir out;
  EXPECT_EQ(run(out, "--help").code, 0);
  EXPECT_NE(run(out, "--help").out.find("train"), std::string::npos);
  EXPECT_EQ(run(out, "").code, 2);
  EXPECT_EQ(run(out, "frobnicate").code, 2);
  EXPECT_EQ(run(out, "train --data x").code, 2);
  EXPECT_EQ(run(out, "train --data " + q("data") + " --out x --mode joint").code, 2);
  EXPECT_EQ(run(out, "train --data " + q("data") + " --out x --epochs 0").code, 2);
  EXPECT_EQ(run(out, "gen --size 48 --out '" + (out / "g").string() + "'").code, 2);
  const Outcome missing = run(out, "fuse --ckpt '" + (out / "none.txf").string() + "' --ir a --vis b --prompt x --out y");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("error:"), std::string::npos);
  spit(out / "bad.txf", "XXXXjunk");
  EXPECT_EQ(run(out, "eval --ckpt '" + (out / "bad.txf").string() + "' --data " + q("data") + " --report r.csv").code,
            1);
}

TEST_F(Cli, GradcheckPasses) {
  TempDir out;
  const Outcome r = run(out, "gradcheck --seed 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("passed"), std::string::npos);
}
