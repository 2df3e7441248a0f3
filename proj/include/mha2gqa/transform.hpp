#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "mha2gqa/grouping.hpp"
#include "mha2gqa/linalg.hpp"
#include "mha2gqa/model.hpp"

namespace mha2gqa {

struct LayerHeadTransforms {
  std::vector<std::size_t> permutation;  // new head k was old head permutation[k]
  std::vector<Matrix> value;             // per head, orthogonal, in regrouped order
  std::vector<BlockRotation> key;        // per head, RoPE-commuting rotation
};

struct HeadTransformSet {
  std::vector<LayerHeadTransforms> layers;
};

// Reorders per-head slices of wq/wk/wv (row blocks) and wo (column blocks) so each
// group's heads become adjacent. Requires an MHA model.
ModelWeights regroup_heads(const ModelWeights& w, const ModelConfig& cfg, const GroupingPlan& plan);
KVCacheSet permute_cache(const KVCacheSet& cache, const GroupingPlan& plan);

struct AlignOptions {
  Criterion criterion = Criterion::kCos;
  double gpa_tol = 1e-8;
  std::size_t gpa_max_iter = 100;
};

struct AlignResult {
  ModelWeights weights;
  HeadTransformSet transforms;
};

// Generalized Procrustes per contiguous group of the regrouped model (weights and
// cache must already be in regrouped order), fused into wq/wk/wv/wo.
AlignResult align_groups(const ModelWeights& w, const ModelConfig& cfg, const KVCacheSet& cache,
                         const GroupingPlan& plan, const AlignOptions& opts = {});

struct InvarianceReport {
  double max_abs = 0.0;
  double max_rel = 0.0;  // max_abs relative to the largest reference logit
  double tol = 0.0;
  bool passed = false;
};

InvarianceReport verify_invariance(const ModelWeights& before, const ModelWeights& after, const ModelConfig& cfg,
                                   std::size_t n_seq, std::size_t seq_len, double tol, std::uint64_t seed = 0);
// Same check against a model with a different (but compatible) config, e.g. after GQA export.
InvarianceReport verify_invariance(const ModelWeights& before, const ModelConfig& cfg_before,
                                   const ModelWeights& after, const ModelConfig& cfg_after, std::size_t n_seq,
                                   std::size_t seq_len, double tol, std::uint64_t seed = 0);

nlohmann::json transforms_to_json(const HeadTransformSet& t);
HeadTransformSet transforms_from_json(const nlohmann::json& j);

}  // namespace mha2gqa
