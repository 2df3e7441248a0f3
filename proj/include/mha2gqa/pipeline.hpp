#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "mha2gqa/grouping.hpp"
#include "mha2gqa/model.hpp"
#include "mha2gqa/pruning.hpp"
#include "mha2gqa/transform.hpp"

namespace mha2gqa {

// Token files are plain text: one sequence per line, whitespace-separated ids.
std::vector<TokenSeq> read_token_file(const std::filesystem::path& path);
void write_token_file(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs);

struct PipelineConfig {
  std::filesystem::path model;
  std::filesystem::path calibration;
  std::filesystem::path train_data;  // defaults to the calibration file
  std::filesystem::path held_out;    // optional; adds a held-out loss to the prune report
  std::filesystem::path out_dir = "out";
  std::size_t n_groups = 4;
  Criterion criterion = Criterion::kCos;
  GroupTarget grouping = GroupTarget::kDefault;
  bool align = true;
  SearchConfig search;
  TrainSchedule schedule;
  // Overrides the search and training seeds.
  std::uint64_t seed = 0;
  double align_tol = 1e-8;
  double permute_tol = 1e-12;
  std::size_t verify_seqs = 32;
  std::size_t verify_len = 16;

  // Copies of search/schedule with the pipeline seed applied.
  SearchConfig search_config() const;
  TrainSchedule train_schedule() const;
};

nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
// Missing keys keep their defaults; relative paths are taken as given.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Artifact file names inside out_dir.
struct Artifacts {
  std::filesystem::path dir;
  std::filesystem::path kv_cache() const { return dir / "kv_cache.bin"; }
  std::filesystem::path similarity() const { return dir / "similarity.csv"; }
  std::filesystem::path plan() const { return dir / "plan.json"; }
  std::filesystem::path transformed() const { return dir / "transformed.bin"; }
  std::filesystem::path transforms() const { return dir / "transforms.json"; }
  std::filesystem::path transform_report() const { return dir / "transform_report.json"; }
  std::filesystem::path gqa() const { return dir / "gqa.bin"; }
  std::filesystem::path trajectory() const { return dir / "trajectory.csv"; }
  std::filesystem::path prune_report() const { return dir / "prune_report.json"; }
  std::filesystem::path verify_report() const { return dir / "verify_report.json"; }
};

nlohmann::json report_to_json(const InvarianceReport& r);

// Each stage reads its inputs from files and writes its outputs to out_dir. A missing
// input raises IoError naming the artifact and the stage that produces it.
void run_calibrate(const PipelineConfig& c);
void run_analyze(const PipelineConfig& c);
void run_group(const PipelineConfig& c);
// Throws VerificationError (after writing the report) when the transformed model
// does not reproduce the source logits.
void run_transform(const PipelineConfig& c);

struct PruneSummary {
  double mean_gate = 0.0;
  double max_residual_gate = 0.0;
  std::optional<double> held_out_distill;
};
PruneSummary run_prune(const PipelineConfig& c);

InvarianceReport run_verify(const std::filesystem::path& a, const std::filesystem::path& b, double tol,
                            std::size_t n_seq, std::size_t seq_len, std::uint64_t seed,
                            const std::filesystem::path& report = {});

// calibrate, analyze, group, transform, prune, then verify(source, transformed).
PruneSummary run_all(const PipelineConfig& c);

}  // namespace mha2gqa
