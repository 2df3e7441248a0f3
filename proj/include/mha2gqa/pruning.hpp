#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mha2gqa/grouping.hpp"
#include "mha2gqa/model.hpp"

namespace mha2gqa {

// Deterministic gate is exactly 1 for log-alpha >= 2.398.
inline constexpr double kDefaultGateInit = 2.5;
// During training a gate's log-alpha stays in [log 0.01, its starting value]. Without
// the ceiling a gate pushed into saturation sees almost no L0 gradient and its group
// head almost no training signal, and it never closes.
inline constexpr double kLogAlphaMin = -4.605170185988091;

// One hard-concrete gate parameter (log-alpha) per layer and original KV head.
struct MaskState {
  std::vector<std::vector<double>> log_alpha;  // [layer][head]

  static MaskState init(std::size_t n_layers, std::size_t n_heads, double log_alpha0 = kDefaultGateInit);
  std::size_t n_gates() const;
  std::vector<std::vector<double>> deterministic_gates() const;
  double mean_deterministic_gate() const;
  double layer_mean_deterministic_gate(std::size_t layer) const;
  double mean_expected_gate() const;
};

// Shared KV projections per layer and group, head_dim x d_model each.
struct GroupHeads {
  std::size_t n_groups = 0;
  std::vector<std::vector<Matrix>> wk;  // [layer][group]
  std::vector<std::vector<Matrix>> wv;
};

// Mean of each group's per-head projections. Groups must be contiguous, i.e. the
// weights were regrouped for `plan` or the plan is the default grouping.
GroupHeads mean_pool_init(const ModelWeights& w, const ModelConfig& cfg, std::size_t n_groups);
GroupHeads mean_pool_init(const ModelWeights& w, const ModelConfig& cfg, const GroupingPlan& plan);

// z * W + (1 - z) * W_group for head `head` of `layer`; returns {W_K, W_V}.
std::pair<Matrix, Matrix> apply_masks(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                                      std::size_t layer, std::size_t head, double z);
// Whole-model blend with per-head gates z[layer][head]; the result is an MHA model.
ModelWeights apply_masks(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                         const std::vector<std::vector<double>>& z);

struct TrainSchedule {
  std::size_t total_steps = 500;
  double warmup_frac = 0.30;
  double freeze_frac = 0.80;
  double lr_model = 0.5;
  double lr_mask = 300.0;
  std::size_t batch_size = 4;
  std::size_t bild_k = 16;
  double gate_init = kDefaultGateInit;
  std::uint64_t seed = 0;

  void validate() const;
  double target(std::size_t step) const;       // T(step)
  bool masks_frozen(std::size_t step) const;
  double lr_scale(std::size_t step) const;     // cosine decay from 1 to 0
};

nlohmann::json schedule_to_json(const TrainSchedule& s);
TrainSchedule schedule_from_json(const nlohmann::json& j);

struct TrajectoryRow {
  std::size_t step = 0;
  std::size_t layer = 0;
  double mean_gate = 0.0;
};

struct PruneResult {
  ModelWeights weights;
  GroupHeads heads;
  MaskState masks;
  std::vector<TrajectoryRow> trajectory;  // per-layer mean deterministic gate after each step
  std::vector<double> losses;             // total loss per step
};

// Parameters of one masked-model step, exposed for gradient checks.
struct MaskedGrad {
  ModelWeights weights;
  GroupHeads heads;
  std::vector<std::vector<double>> log_alpha;
};

struct MaskedLoss {
  double distill = 0.0;
  double l0 = 0.0;
  double total() const { return distill + l0; }
};

// Distillation loss of the masked student (gates from hard-concrete samples with the
// given noise) averaged over `seqs`, plus the L0 loss on the mean expected gate.
// Gradients for every parameter class are written to `grad` when non-null.
MaskedLoss masked_loss_and_grad(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                                const MaskState& masks, const std::vector<std::vector<double>>& noise,
                                double target, std::span<const TokenSeq> seqs,
                                std::span<const Matrix> teacher_logits, std::size_t bild_k, MaskedGrad* grad);

PruneResult prune_train(const ModelWeights& student, const ModelConfig& cfg, GroupHeads heads, MaskState masks,
                        const TrainSchedule& schedule, const ModelWeights& teacher, const ModelConfig& teacher_cfg,
                        const std::vector<TokenSeq>& data);

struct GqaExport {
  ModelWeights weights;
  ModelConfig config;
  double max_residual_gate = 0.0;
  std::vector<std::string> warnings;
};

inline constexpr double kResidualGateThreshold = 0.01;

// Drops the original KV projections and keeps the group heads (z = 0): a standard GQA
// model with n_kv_heads = number of groups.
GqaExport finalize_gqa(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                       const MaskState& masks);

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path);

// Mean distillation loss of a student against a teacher over held-out sequences.
double evaluate_distill(const ModelWeights& student, const ModelConfig& student_cfg, const ModelWeights& teacher,
                        const ModelConfig& teacher_cfg, std::span<const TokenSeq> seqs, std::size_t bild_k);

}  // namespace mha2gqa
