#include "mha2gqa/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "mha2gqa/error.hpp"
#include "mha2gqa/json_io.hpp"
#include "mha2gqa/similarity.hpp"
#include "mha2gqa/tensor_file.hpp"

namespace mha2gqa {

std::vector<TokenSeq> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open token file '" + path.string() + "'");
  std::vector<TokenSeq> seqs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    TokenSeq seq;
    std::string tok;
    while (ss >> tok) {
      std::size_t used = 0;
      long v = -1;
      try {
        v = std::stol(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0) {
        throw FormatError(FormatError::Detail::kOther, path.string() + ":" + std::to_string(lineno) +
                                                           ": bad token '" + tok + "'");
      }
      seq.push_back(static_cast<int>(v));
    }
    if (!seq.empty()) seqs.push_back(std::move(seq));
  }
  if (seqs.empty()) throw FormatError(FormatError::Detail::kOther, "token file '" + path.string() + "' is empty");
  return seqs;
}

void write_token_file(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

SearchConfig PipelineConfig::search_config() const {
  SearchConfig s = search;
  s.seed = seed;
  return s;
}

TrainSchedule PipelineConfig::train_schedule() const {
  TrainSchedule s = schedule;
  s.seed = seed;
  return s;
}

nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  auto sched = schedule_to_json(c.schedule);
  sched.erase("seed");
  return {{"model", c.model.string()},
          {"calibration", c.calibration.string()},
          {"train_data", c.train_data.string()},
          {"held_out", c.held_out.string()},
          {"out_dir", c.out_dir.string()},
          {"groups", c.n_groups},
          {"criterion", to_string(c.criterion)},
          {"grouping", to_string(c.grouping)},
          {"align", c.align},
          {"seed", c.seed},
          {"search", {{"max_iter", c.search.max_iter}, {"epochs", c.search.epochs},
                      {"temperature", c.search.temperature}}},
          {"schedule", sched},
          {"verify", {{"align_tol", c.align_tol}, {"permute_tol", c.permute_tol},
                      {"sequences", c.verify_seqs}, {"seq_len", c.verify_len}}}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    if (!j.is_object()) throw InvalidArgument("pipeline config must be a JSON object");
    const auto path = [&](const char* key, std::filesystem::path& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::string>();
    };
    path("model", c.model);
    path("calibration", c.calibration);
    path("train_data", c.train_data);
    path("held_out", c.held_out);
    path("out_dir", c.out_dir);
    c.n_groups = j.value("groups", c.n_groups);
    if (j.contains("criterion")) c.criterion = criterion_from_string(j.at("criterion").get<std::string>());
    if (j.contains("grouping")) c.grouping = group_target_from_string(j.at("grouping").get<std::string>());
    c.align = j.value("align", c.align);
    c.seed = j.value("seed", c.seed);
    if (j.contains("search")) {
      const auto& s = j.at("search");
      c.search.max_iter = s.value("max_iter", c.search.max_iter);
      c.search.epochs = s.value("epochs", c.search.epochs);
      c.search.temperature = s.value("temperature", c.search.temperature);
    }
    if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
    if (j.contains("verify")) {
      const auto& v = j.at("verify");
      c.align_tol = v.value("align_tol", c.align_tol);
      c.permute_tol = v.value("permute_tol", c.permute_tol);
      c.verify_seqs = v.value("sequences", c.verify_seqs);
      c.verify_len = v.value("seq_len", c.verify_len);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad pipeline config: ") + e.what());
  }
  return c;
}

nlohmann::json report_to_json(const InvarianceReport& r) {
  return {{"max_abs", r.max_abs}, {"max_rel", r.max_rel}, {"tol", r.tol}, {"passed", r.passed}};
}

namespace {

void require_input(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw InvalidArgument(std::string("no ") + what + " given");
  if (!std::filesystem::exists(p)) throw IoError(std::string(what) + " '" + p.string() + "' does not exist");
}

void require_upstream(const std::filesystem::path& p, const char* stage) {
  if (!std::filesystem::exists(p)) {
    throw IoError("missing upstream artifact '" + p.string() + "'; run `" + stage + "` first");
  }
}

void ensure_out_dir(const PipelineConfig& c) {
  std::error_code ec;
  std::filesystem::create_directories(c.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + c.out_dir.string() + "': " + ec.message());
}

Checkpoint load_source(const PipelineConfig& c) {
  require_input(c.model, "model");
  auto ck = load_checkpoint(c.model);
  if (!ck.config.is_mha()) throw InvalidArgument("source model must be MHA (n_kv_heads == n_heads)");
  return ck;
}

void check_groups(const ModelConfig& cfg, std::size_t n_groups) {
  if (n_groups == 0 || cfg.n_heads % n_groups != 0) {
    throw InvalidArgument("--groups " + std::to_string(n_groups) + " does not divide " + std::to_string(cfg.n_heads) +
                          " heads");
  }
}

CacheTarget cache_target(GroupTarget t) { return t == GroupTarget::kKey ? CacheTarget::kKey : CacheTarget::kValue; }

}  // namespace

void run_calibrate(const PipelineConfig& c) {
  const auto src = load_source(c);
  require_input(c.calibration, "calibration file");
  const auto calib = read_token_file(c.calibration);
  ensure_out_dir(c);
  save_kv_cache(collect_kv(src.weights, src.config, calib), Artifacts{c.out_dir}.kv_cache());
}

void run_analyze(const PipelineConfig& c) {
  const auto src = load_source(c);
  const Artifacts art{c.out_dir};
  require_upstream(art.kv_cache(), "calibrate");
  const auto cache = load_kv_cache(art.kv_cache());
  std::vector<SimilarityMatrix> all;
  for (auto target : {CacheTarget::kKey, CacheTarget::kValue}) {
    for (auto& s : original_similarity(cache, target, c.criterion)) all.push_back(std::move(s));
    for (auto& s : aligned_similarity(cache, target, c.criterion, src.config.rope_pairing)) all.push_back(std::move(s.sim));
  }
  export_similarity_report(all, art.similarity());
}

void run_group(const PipelineConfig& c) {
  const auto src = load_source(c);
  const auto& cfg = src.config;
  check_groups(cfg, c.n_groups);
  const Artifacts art{c.out_dir};
  GroupingPlan plan{c.grouping, c.criterion, cfg.n_heads, c.n_groups, {}};
  if (c.grouping == GroupTarget::kDefault) {
    plan.layers.assign(cfg.n_layers, default_grouping(cfg.n_heads, c.n_groups));
  } else {
    require_upstream(art.similarity(), "analyze");
    const auto sims = import_similarity_report(art.similarity());
    const auto target = cache_target(c.grouping);
    const auto search = c.search_config();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const SimilarityMatrix* found = nullptr;
      for (const auto& s : sims)
        if (s.layer == l && s.target == target && s.criterion == c.criterion && s.stage == SimilarityStage::kAfter)
          found = &s;
      if (!found || found->n_heads() != cfg.n_heads) {
        throw FormatError(FormatError::Detail::kOther,
                          "'" + art.similarity().string() + "' has no aligned " + to_string(target) + "/" +
                              to_string(c.criterion) + " scores for layer " + std::to_string(l) +
                              "; rerun `analyze` with the same criterion");
      }
      plan.layers.push_back(search_grouping(*found, c.n_groups, search).best);
    }
  }
  ensure_out_dir(c);
  save_plan(plan, art.plan());
}

void run_transform(const PipelineConfig& c) {
  const auto src = load_source(c);
  const auto& cfg = src.config;
  const Artifacts art{c.out_dir};
  require_upstream(art.plan(), "group");
  const auto plan = load_plan(art.plan());
  if (plan.n_heads != cfg.n_heads || plan.layers.size() != cfg.n_layers) {
    throw InvalidArgument("plan '" + art.plan().string() + "' does not match the model");
  }
  const ModelWeights regrouped = regroup_heads(src.weights, cfg, plan);
  AlignResult res;
  if (c.align) {
    require_upstream(art.kv_cache(), "calibrate");
    AlignOptions opts;
    opts.criterion = c.criterion;
    res = align_groups(regrouped, cfg, permute_cache(load_kv_cache(art.kv_cache()), plan), plan, opts);
  } else {
    res.weights = regrouped;
    res.transforms.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      auto& lt = res.transforms.layers[l];
      lt.permutation = partition_permutation(plan.layers[l].groups);
      lt.value.assign(cfg.n_heads, Matrix::identity(cfg.head_dim));
      lt.key.assign(cfg.n_heads, BlockRotation::identity(cfg.head_dim, cfg.rope_pairing));
    }
  }
  const double tol = c.align ? c.align_tol : c.permute_tol;
  const auto report = verify_invariance(src.weights, res.weights, cfg, c.verify_seqs, c.verify_len, tol, c.seed);
  save_checkpoint(res.weights, cfg, art.transformed());
  write_json_file(art.transforms(), transforms_to_json(res.transforms));
  auto j = report_to_json(report);
  j["aligned"] = c.align;
  write_json_file(art.transform_report(), j);
  if (!report.passed) {
    throw VerificationError("transformed model changes logits by " + std::to_string(report.max_abs) + " (tol " +
                            std::to_string(tol) + ")");
  }
}

PruneSummary run_prune(const PipelineConfig& c) {
  const auto teacher = load_source(c);
  const Artifacts art{c.out_dir};
  require_upstream(art.transformed(), "transform");
  require_upstream(art.plan(), "group");
  const auto student = load_checkpoint(art.transformed());
  if (!(student.config == teacher.config)) throw InvalidArgument("transformed model does not match the source model");
  const auto plan = load_plan(art.plan());
  check_groups(student.config, plan.n_groups);

  const auto data_path = c.train_data.empty() ? c.calibration : c.train_data;
  require_input(data_path, "training data");
  const auto data = read_token_file(data_path);
  const auto schedule = c.train_schedule();

  const auto& cfg = student.config;
  auto result = prune_train(student.weights, cfg, mean_pool_init(student.weights, cfg, plan.n_groups),
                            MaskState::init(cfg.n_layers, cfg.n_heads, schedule.gate_init), schedule, teacher.weights,
                            teacher.config, data);
  const auto exported = finalize_gqa(result.weights, cfg, result.heads, result.masks);

  PruneSummary summary;
  summary.mean_gate = result.masks.mean_deterministic_gate();
  summary.max_residual_gate = exported.max_residual_gate;
  if (!c.held_out.empty()) {
    require_input(c.held_out, "held-out data");
    summary.held_out_distill = evaluate_distill(exported.weights, exported.config, teacher.weights, teacher.config,
                                                read_token_file(c.held_out), schedule.bild_k);
  }

  save_checkpoint(exported.weights, exported.config, art.gqa());
  write_trajectory_csv(result.trajectory, art.trajectory());
  nlohmann::json j = {{"n_kv_heads", exported.config.n_kv_heads},
                      {"mean_gate", summary.mean_gate},
                      {"max_residual_gate", summary.max_residual_gate},
                      {"warnings", exported.warnings},
                      {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
                      {"schedule", schedule_to_json(schedule)}};
  if (summary.held_out_distill) j["held_out_distill"] = *summary.held_out_distill;
  write_json_file(art.prune_report(), j);
  return summary;
}

InvarianceReport run_verify(const std::filesystem::path& a, const std::filesystem::path& b, double tol,
                            std::size_t n_seq, std::size_t seq_len, std::uint64_t seed,
                            const std::filesystem::path& report) {
  require_input(a, "model");
  require_input(b, "model");
  const auto x = load_checkpoint(a);
  const auto y = load_checkpoint(b);
  const auto r = verify_invariance(x.weights, x.config, y.weights, y.config, n_seq, seq_len, tol, seed);
  if (!report.empty()) write_json_file(report, report_to_json(r));
  return r;
}

PruneSummary run_all(const PipelineConfig& c) {
  check_groups(load_source(c).config, c.n_groups);
  run_calibrate(c);
  run_analyze(c);
  run_group(c);
  run_transform(c);
  const auto summary = run_prune(c);
  const Artifacts art{c.out_dir};
  const double tol = c.align ? c.align_tol : c.permute_tol;
  const auto r = run_verify(c.model, art.transformed(), tol, c.verify_seqs, c.verify_len, c.seed, art.verify_report());
  if (!r.passed) throw VerificationError("verify: transformed model changes logits by " + std::to_string(r.max_abs));
  return summary;
}

}  // namespace mha2gqa
