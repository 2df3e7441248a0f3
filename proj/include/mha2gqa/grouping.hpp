#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "mha2gqa/similarity.hpp"

namespace mha2gqa {

// Groups of head indices. Canonical form: each group sorted, groups ordered by first head.
using Partition = std::vector<std::vector<std::size_t>>;

enum class GroupTarget { kKey, kValue, kDefault };
const char* to_string(GroupTarget t);
GroupTarget group_target_from_string(const std::string& s);

struct LayerGrouping {
  Partition groups;
  std::optional<double> score;
  bool operator==(const LayerGrouping&) const = default;
};

struct GroupingPlan {
  GroupTarget target = GroupTarget::kDefault;
  Criterion criterion = Criterion::kCos;
  std::size_t n_heads = 0;
  std::size_t n_groups = 0;
  std::vector<LayerGrouping> layers;

  std::size_t group_size() const { return n_heads / n_groups; }
  bool operator==(const GroupingPlan&) const = default;
};

struct SearchConfig {
  std::size_t max_iter = 2000;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  // > 0 enables Metropolis acceptance of worsening swaps; 0 keeps strict hill climbing.
  double temperature = 0.0;

  void validate() const;
};

struct SearchResult {
  LayerGrouping best;
  // Current score after every iteration, per epoch. Index 0 is the random initial grouping.
  std::vector<std::vector<double>> traces;
};

// Throws InvalidArgument unless `p` has n_groups groups of equal size covering 0..n_heads-1 once.
void validate_partition(const Partition& p, std::size_t n_heads, std::size_t n_groups);
Partition canonical(Partition p);

// Sum over groups of all within-group unordered-pair scores.
double score_grouping(const Partition& p, const SimilarityMatrix& sim);

SearchResult search_grouping(const SimilarityMatrix& sim, std::size_t n_groups, const SearchConfig& cfg);
LayerGrouping default_grouping(std::size_t n_heads, std::size_t n_groups);

// Number of ways to split n_heads labels into n_groups unlabeled groups of equal size.
double count_partitions(std::size_t n_heads, std::size_t n_groups);

struct ExhaustiveResult {
  LayerGrouping best;
  std::size_t enumerated = 0;
};

inline constexpr double kExhaustiveLimit = 1e6;

// Enumerates every partition (at most kExhaustiveLimit); `visit` sees each candidate and its score.
ExhaustiveResult exhaustive_grouping(const SimilarityMatrix& sim, std::size_t n_groups,
                                     const std::function<void(const Partition&, double)>& visit = {});

// New head k takes old head perm[k]: groups concatenated in order.
std::vector<std::size_t> partition_permutation(const Partition& p);
bool is_contiguous(const Partition& p);

nlohmann::json plan_to_json(const GroupingPlan& plan);
GroupingPlan plan_from_json(const nlohmann::json& j);
void save_plan(const GroupingPlan& plan, const std::filesystem::path& path);
GroupingPlan load_plan(const std::filesystem::path& path);

}  // namespace mha2gqa
