#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mha2gqa/error.hpp"
#include "mha2gqa/json_io.hpp"
#include "mha2gqa/kernels.hpp"
#include "mha2gqa/pipeline.hpp"
#include "mha2gqa/synthetic.hpp"
#include "mha2gqa/tensor_file.hpp"

using namespace mha2gqa;

namespace {

// Flags mirror PipelineConfig; anything given on the command line overrides --config.
struct PipelineFlags {
  std::optional<std::string> config, model, calibration, train_data, held_out, out_dir;
  std::optional<std::size_t> groups;
  std::optional<std::string> criterion, grouping;
  std::optional<std::uint64_t> seed;
  bool skip_align = false;
  std::optional<std::size_t> epochs, max_iter;
  std::optional<double> temperature;
  std::optional<std::size_t> steps, batch_size, bild_k;
  std::optional<double> lr_model, lr_mask, warmup, freeze;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON pipeline config; flags override it")->check(CLI::ExistingFile);
    app->add_option("--model", model, "source MHA checkpoint");
    app->add_option("--calibration", calibration, "token file for KV-cache collection");
    app->add_option("--train-data", train_data, "token file for pruning (default: calibration)");
    app->add_option("--held-out", held_out, "token file for the held-out distillation loss");
    app->add_option("--out", out_dir, "output directory");
    app->add_option("-G,--groups", groups, "number of KV groups");
    app->add_option("--criterion", criterion, "cos or dist")->check(CLI::IsMember({"cos", "dist"}));
    app->add_option("--grouping", grouping, "default, key or value")->check(CLI::IsMember({"default", "key", "value"}));
    app->add_option("--seed", seed, "seed for grouping search and training");
    app->add_flag("--skip-align", skip_align, "regroup only, no orthogonal alignment");
    app->add_option("--epochs", epochs, "grouping search epochs");
    app->add_option("--max-iter", max_iter, "grouping search iterations per epoch");
    app->add_option("--temperature", temperature, "grouping search temperature (0 = hill climb)");
    app->add_option("--steps", steps, "pruning steps");
    app->add_option("--batch-size", batch_size, "pruning batch size");
    app->add_option("--bild-k", bild_k, "top-k for the BiLD loss");
    app->add_option("--lr-model", lr_model, "model and group-head learning rate");
    app->add_option("--lr-mask", lr_mask, "gate learning rate");
    app->add_option("--warmup", warmup, "fraction of steps over which the target size falls to 0");
    app->add_option("--freeze", freeze, "fraction of steps after which gates are frozen");
  }

  PipelineConfig resolve() const {
    PipelineConfig c;
    if (config) {
      c = pipeline_config_from_json(read_json_file(*config));
      // Relative paths in a config file are relative to the file itself.
      const auto base = std::filesystem::path(*config).parent_path();
      for (auto* p : {&c.model, &c.calibration, &c.train_data, &c.held_out, &c.out_dir})
        if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    if (model) c.model = *model;
    if (calibration) c.calibration = *calibration;
    if (train_data) c.train_data = *train_data;
    if (held_out) c.held_out = *held_out;
    if (out_dir) c.out_dir = *out_dir;
    if (groups) c.n_groups = *groups;
    if (criterion) c.criterion = criterion_from_string(*criterion);
    if (grouping) c.grouping = group_target_from_string(*grouping);
    if (seed) c.seed = *seed;
    if (skip_align) c.align = false;
    if (epochs) c.search.epochs = *epochs;
    if (max_iter) c.search.max_iter = *max_iter;
    if (temperature) c.search.temperature = *temperature;
    if (steps) c.schedule.total_steps = *steps;
    if (batch_size) c.schedule.batch_size = *batch_size;
    if (bild_k) c.schedule.bild_k = *bild_k;
    if (lr_model) c.schedule.lr_model = *lr_model;
    if (lr_mask) c.schedule.lr_mask = *lr_mask;
    if (warmup) c.schedule.warmup_frac = *warmup;
    if (freeze) c.schedule.freeze_frac = *freeze;
    c.search.validate();
    c.schedule.validate();
    return c;
  }
};

void print_prune(const PruneSummary& s) {
  std::printf("mean gate %.6f, max residual gate %.6f", s.mean_gate, s.max_residual_gate);
  if (s.held_out_distill) std::printf(", held-out distill loss %.6f", *s.held_out_distill);
  std::printf("\n");
}

struct ToyOptions {
  std::string out = "toy";
  std::size_t steps = 1500;
  std::size_t train_seqs = 8192;
  std::uint64_t seed = 0;
};

// Trains a toy MHA teacher on the pattern task and writes it with token files and a
// ready-to-use pipeline config.
void make_toy(const ToyOptions& o) {
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  const auto cfg = toy_config();
  const PatternTask task;
  TeacherTraining opts;
  opts.steps = o.steps;
  opts.seed = o.seed;
  auto init = init_random_weights(cfg, o.seed + 7);
  const auto weights = o.steps ? train_teacher(init, cfg, make_pattern_data(task, o.train_seqs, o.seed + 1), opts).weights
                               : init;
  save_checkpoint(weights, cfg, dir / "model.bin");
  write_token_file(dir / "calib.txt", make_pattern_data(task, 64, o.seed + 3));
  write_token_file(dir / "train.txt", make_pattern_data(task, 512, o.seed + 4));
  const auto held = make_pattern_data(task, 64, o.seed + 5);
  write_token_file(dir / "heldout.txt", held);
  PipelineConfig pc;
  pc.model = "model.bin";
  pc.calibration = "calib.txt";
  pc.train_data = "train.txt";
  pc.held_out = "heldout.txt";
  pc.out_dir = "run";
  pc.grouping = GroupTarget::kValue;
  write_json_file(dir / "config.json", pipeline_config_to_json(pc));
  std::printf("teacher held-out next-token loss %.4f\n", mean_next_token_loss(weights, cfg, held));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convert multi-head attention checkpoints to grouped-query attention"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "cap on worker threads (0 = runtime default)")->check(CLI::NonNegativeNumber);

  PipelineFlags flags;
  auto* calibrate = app.add_subcommand("calibrate", "collect per-head KV caches on calibration tokens");
  auto* analyze = app.add_subcommand("analyze", "pairwise head similarity before and after alignment");
  auto* group = app.add_subcommand("group", "search a grouping of heads");
  auto* transform = app.add_subcommand("transform", "regroup and align heads, check invariance");
  auto* prune = app.add_subcommand("prune", "distill the transformed model into GQA and export it");
  auto* run_all_cmd = app.add_subcommand("run-all", "all stages in order, then verify");
  for (auto* sub : {calibrate, analyze, group, transform, prune, run_all_cmd}) flags.attach(sub);

  auto* verify = app.add_subcommand("verify", "compare the logits of two checkpoints");
  std::string va, vb, vreport;
  double vtol = 1e-12;
  std::size_t vseqs = 32, vlen = 16;
  std::uint64_t vseed = 0;
  verify->add_option("a", va, "reference checkpoint")->required();
  verify->add_option("b", vb, "checkpoint under test")->required();
  verify->add_option("--tol", vtol, "max-abs logit tolerance");
  verify->add_option("--sequences", vseqs, "number of random sequences");
  verify->add_option("--seq-len", vlen, "tokens per sequence");
  verify->add_option("--seed", vseed, "seed for the random sequences");
  verify->add_option("--report", vreport, "write the report as JSON");

  ToyOptions toy;
  auto* make_toy_cmd = app.add_subcommand("make-toy", "train a toy teacher and write demo inputs");
  make_toy_cmd->add_option("--out", toy.out, "output directory");
  make_toy_cmd->add_option("--steps", toy.steps, "teacher training steps (0 = random model)");
  make_toy_cmd->add_option("--train-seqs", toy.train_seqs, "teacher training sequences");
  make_toy_cmd->add_option("--seed", toy.seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (threads > 0) kernels::set_num_threads(threads);
    if (verify->parsed()) {
      const auto r = run_verify(va, vb, vtol, vseqs, vlen, vseed, vreport);
      std::printf("%s: max abs %.3e, max rel %.3e, tol %.1e\n", r.passed ? "PASS" : "FAIL", r.max_abs, r.max_rel, r.tol);
      return r.passed ? 0 : static_cast<int>(ErrorKind::kVerification);
    }
    if (make_toy_cmd->parsed()) {
      make_toy(toy);
      return 0;
    }
    const auto cfg = flags.resolve();
    if (calibrate->parsed()) run_calibrate(cfg);
    if (analyze->parsed()) run_analyze(cfg);
    if (group->parsed()) run_group(cfg);
    if (transform->parsed()) run_transform(cfg);
    if (prune->parsed()) print_prune(run_prune(cfg));
    if (run_all_cmd->parsed()) print_prune(run_all(cfg));
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::kIo);
  }
}
