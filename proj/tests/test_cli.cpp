#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "mha2gqa/error.hpp"
#include "mha2gqa/json_io.hpp"
#include "mha2gqa/pipeline.hpp"
#include "mha2gqa/synthetic.hpp"
#include "mha2gqa/tensor_file.hpp"

namespace fs = std::filesystem;

namespace mha2gqa {
namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(MHA2GQA_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mha2gqa_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto cfg = toy_config();
    save_checkpoint(init_random_weights(cfg, 11), cfg, dir_ / "model.bin");
    PatternTask task;
    task.seq_len = 16;
    write_token_file(dir_ / "calib.txt", make_pattern_data(task, 8, 1));
    write_token_file(dir_ / "train.txt", make_pattern_data(task, 32, 2));
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string base(const fs::path& out) const {
    return "--model " + (dir_ / "model.bin").string() + " --calibration " + (dir_ / "calib.txt").string() +
           " --train-data " + (dir_ / "train.txt").string() + " --out " + out.string() +
           " --epochs 4 --steps 12 --batch-size 2";
  }

  fs::path dir_;
};

TEST_F(Cli, CalibrateCountsTokensAndIsDeterministic) {
  PatternTask task;
  task.seq_len = 128;
  write_token_file(dir_ / "big.txt", make_pattern_data(task, 64, 3));
  const std::string common = "--model " + (dir_ / "model.bin").string() + " --calibration " + (dir_ / "big.txt").string();
  ASSERT_EQ(run("calibrate " + common + " --out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(run("calibrate " + common + " --out " + (dir_ / "b").string()), 0);
  EXPECT_EQ(load_kv_cache(dir_ / "a" / "kv_cache.bin").n_tokens, 8192u);
  EXPECT_EQ(slurp(dir_ / "a" / "kv_cache.bin"), slurp(dir_ / "b" / "kv_cache.bin"));
}

TEST_F(Cli, RunAllEmitsGqaCheckpoint) {
  const auto out = dir_ / "out";
  ASSERT_EQ(run("run-all " + base(out) + " -G 2 --grouping default --criterion cos"), 0);
  const auto ck = load_checkpoint(out / "gqa.bin");
  EXPECT_EQ(ck.config.n_kv_heads, 2u);
  EXPECT_EQ(ck.weights.layers[0].wk.rows(), 2 * ck.config.head_dim);
  EXPECT_TRUE(read_json_file(out / "verify_report.json").at("passed").get<bool>());
}

TEST_F(Cli, RunAllMatchesStageByStage) {
  const auto all = dir_ / "all";
  const auto staged = dir_ / "staged";
  const std::string opts = " -G 4 --grouping value --criterion dist --seed 5";
  ASSERT_EQ(run("run-all " + base(all) + opts), 0);
  for (const char* stage : {"calibrate", "analyze", "group", "transform", "prune"})
    ASSERT_EQ(run(std::string(stage) + " " + base(staged) + opts), 0) << stage;
  for (const char* f : {"kv_cache.bin", "similarity.csv", "plan.json", "transformed.bin", "transforms.json",
                        "transform_report.json", "gqa.bin", "trajectory.csv", "prune_report.json"}) {
    EXPECT_EQ(slurp(all / f), slurp(staged / f)) << f;
  }
}

TEST_F(Cli, RegroupedModelVerifiesAtPermutationTolerance) {
  const auto out = dir_ / "out";
  const std::string opts = base(out) + " -G 2 --grouping key --skip-align";
  ASSERT_EQ(run("calibrate " + opts), 0);
  ASSERT_EQ(run("analyze " + opts), 0);
  ASSERT_EQ(run("group " + opts), 0);
  ASSERT_EQ(run("transform " + opts), 0);
  EXPECT_EQ(run("verify " + (dir_ / "model.bin").string() + " " + (out / "transformed.bin").string() + " --tol 1e-12"), 0);
}

TEST_F(Cli, VerifyFailureExitsThree) {
  const auto cfg = toy_config();
  save_checkpoint(init_random_weights(cfg, 12), cfg, dir_ / "other.bin");
  EXPECT_EQ(run("verify " + (dir_ / "model.bin").string() + " " + (dir_ / "other.bin").string()), 3);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("group " + base(dir_ / "out") + " -G 3"), 1);
  EXPECT_EQ(run("run-all " + base(dir_ / "out") + " -G 3"), 1);
  EXPECT_EQ(run("group --criterion cosine"), 1);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, MissingUpstreamArtifactExitsTwo) {
  const auto out = dir_ / "out";
  EXPECT_EQ(run("analyze " + base(out)), 2);
  EXPECT_EQ(run("group " + base(out) + " --grouping value"), 2);
  EXPECT_EQ(run("transform " + base(out)), 2);
  EXPECT_EQ(run("prune " + base(out)), 2);
  const auto calibrate_with = [&](const fs::path& model) {
    return run("calibrate --model " + model.string() + " --calibration " + (dir_ / "calib.txt").string() + " --out " +
               out.string());
  };
  EXPECT_EQ(calibrate_with(dir_ / "nope.bin"), 2);
  std::ofstream(dir_ / "bad.bin") << "not a checkpoint";
  EXPECT_EQ(calibrate_with(dir_ / "bad.bin"), 2);
}

TEST_F(Cli, DivergenceExitsFour) {
  const auto out = dir_ / "out";
  ASSERT_EQ(run("calibrate " + base(out)), 0);
  ASSERT_EQ(run("group " + base(out) + " -G 2"), 0);
  ASSERT_EQ(run("transform " + base(out) + " -G 2"), 0);
  EXPECT_EQ(run("prune " + base(out) + " --lr-model 1e300"), 4);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  PipelineConfig pc;
  pc.model = "model.bin";
  pc.calibration = "calib.txt";
  pc.train_data = "train.txt";
  pc.out_dir = "from_config";
  pc.n_groups = 3;  // invalid for 8 heads; overridden below
  pc.schedule.total_steps = 12;
  pc.search.epochs = 4;
  write_json_file(dir_ / "config.json", pipeline_config_to_json(pc));
  const std::string cfg = "--config " + (dir_ / "config.json").string();
  EXPECT_EQ(run("group " + cfg), 1);
  ASSERT_EQ(run("run-all " + cfg + " -G 4"), 0);
  EXPECT_EQ(load_plan(dir_ / "from_config" / "plan.json").n_groups, 4u);
  EXPECT_EQ(load_checkpoint(dir_ / "from_config" / "gqa.bin").config.n_kv_heads, 4u);
}

TEST(PipelineConfig, JsonRoundTrip) {
  PipelineConfig c;
  c.model = "m.bin";
  c.n_groups = 2;
  c.criterion = Criterion::kDist;
  c.grouping = GroupTarget::kKey;
  c.align = false;
  c.seed = 9;
  c.search.epochs = 3;
  c.schedule.lr_mask = 7.0;
  const auto back = pipeline_config_from_json(pipeline_config_to_json(c));
  EXPECT_EQ(pipeline_config_to_json(back), pipeline_config_to_json(c));
  EXPECT_EQ(back.train_schedule().seed, 9u);
  EXPECT_EQ(back.search_config().seed, 9u);
}

TEST(TokenFile, RoundTripAndErrors) {
  const auto p = fs::temp_directory_path() / ("mha2gqa_tok_" + std::to_string(::getpid()) + ".txt");
  const std::vector<TokenSeq> seqs{{1, 2, 3}, {255}, {0, 0}};
  write_token_file(p, seqs);
  EXPECT_EQ(read_token_file(p), seqs);
  std::ofstream(p) << "1 2 x\n";
  EXPECT_THROW(read_token_file(p), FormatError);
  std::ofstream(p) << "\n\n";
  EXPECT_THROW(read_token_file(p), FormatError);
  fs::remove(p);
  EXPECT_THROW(read_token_file(p), IoError);
}

}  // namespace
}  // namespace mha2gqa
