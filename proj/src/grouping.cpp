#include "mha2gqa/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mha2gqa/error.hpp"
#include "mha2gqa/json_io.hpp"

namespace mha2gqa {

const char* to_string(GroupTarget t) {
  switch (t) {
    case GroupTarget::kKey: return "key";
    case GroupTarget::kValue: return "value";
    case GroupTarget::kDefault: return "default";
  }
  return "?";
}

GroupTarget group_target_from_string(const std::string& s) {
  if (s == "key") return GroupTarget::kKey;
  if (s == "value") return GroupTarget::kValue;
  if (s == "default") return GroupTarget::kDefault;
  throw InvalidArgument("unknown grouping target '" + s + "' (expected key|value|default)");
}

void SearchConfig::validate() const {
  if (max_iter < 1) throw InvalidArgument("search: max_iter must be >= 1");
  if (epochs < 1) throw InvalidArgument("search: epochs must be >= 1");
  if (!(temperature >= 0.0)) throw InvalidArgument("search: temperature must be >= 0");
}

namespace {

void check_divisible(std::size_t n_heads, std::size_t n_groups) {
  if (n_groups == 0 || n_heads == 0 || n_heads % n_groups != 0) {
    throw InvalidArgument("cannot split " + std::to_string(n_heads) + " heads into " + std::to_string(n_groups) +
                          " equal groups");
  }
}

double group_score(const std::vector<std::size_t>& g, const Matrix& s) {
  double total = 0.0;
  for (std::size_t a = 0; a < g.size(); ++a)
    for (std::size_t b = a + 1; b < g.size(); ++b) total += s(g[a], g[b]);
  return total;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void validate_partition(const Partition& p, std::size_t n_heads, std::size_t n_groups) {
  check_divisible(n_heads, n_groups);
  if (p.size() != n_groups) {
    throw InvalidArgument("partition has " + std::to_string(p.size()) + " groups, expected " + std::to_string(n_groups));
  }
  std::vector<bool> seen(n_heads, false);
  for (const auto& g : p) {
    if (g.size() != n_heads / n_groups) throw InvalidArgument("partition groups differ in size");
    for (auto h : g) {
      if (h >= n_heads) throw InvalidArgument("partition head index " + std::to_string(h) + " out of range");
      if (seen[h]) throw InvalidArgument("partition repeats head " + std::to_string(h));
      seen[h] = true;
    }
  }
}

Partition canonical(Partition p) {
  for (auto& g : p) std::sort(g.begin(), g.end());
  std::sort(p.begin(), p.end());
  return p;
}

double score_grouping(const Partition& p, const SimilarityMatrix& sim) {
  if (sim.stage != SimilarityStage::kAfter) throw InvalidArgument("score_grouping: needs after-alignment similarity");
  validate_partition(p, sim.n_heads(), p.size());
  double total = 0.0;
  for (const auto& g : p) total += group_score(g, sim.scores);
  return total;
}

LayerGrouping default_grouping(std::size_t n_heads, std::size_t n_groups) {
  check_divisible(n_heads, n_groups);
  const std::size_t d = n_heads / n_groups;
  LayerGrouping out;
  for (std::size_t g = 0; g < n_groups; ++g) {
    out.groups.emplace_back(d);
    std::iota(out.groups.back().begin(), out.groups.back().end(), g * d);
  }
  return out;
}

SearchResult search_grouping(const SimilarityMatrix& sim, std::size_t n_groups, const SearchConfig& cfg) {
  cfg.validate();
  if (sim.stage != SimilarityStage::kAfter) throw InvalidArgument("search_grouping: needs after-alignment similarity");
  const std::size_t h = sim.n_heads();
  check_divisible(h, n_groups);
  const std::size_t d = h / n_groups;
  const Matrix& s = sim.scores;

  struct EpochOutcome {
    std::uint64_t sub_seed = 0;
    Partition best;
    double best_score = 0.0;
    std::vector<double> trace;
  };
  std::vector<EpochOutcome> epochs(cfg.epochs);
  const auto n_epochs = static_cast<long>(cfg.epochs);

#pragma omp parallel for schedule(dynamic)
  for (long e = 0; e < n_epochs; ++e) {
    EpochOutcome& out = epochs[static_cast<std::size_t>(e)];
    out.sub_seed = splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(e)));
    std::mt19937_64 rng(out.sub_seed);

    std::vector<std::size_t> order(h);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Partition cur(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) cur[g].assign(order.begin() + g * d, order.begin() + (g + 1) * d);

    double cur_score = 0.0;
    for (const auto& g : cur) cur_score += group_score(g, s);
    out.best = cur;
    out.best_score = cur_score;
    out.trace.reserve(cfg.max_iter + 1);
    out.trace.push_back(cur_score);

    std::uniform_int_distribution<std::size_t> pick_group(0, n_groups - 1);
    std::uniform_int_distribution<std::size_t> pick_member(0, d - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t it = 0; it < cfg.max_iter; ++it) {
      if (n_groups < 2 || d < 1) {
        out.trace.push_back(cur_score);
        continue;
      }
      const std::size_t ga = pick_group(rng);
      std::size_t gb = pick_group(rng);
      while (gb == ga) gb = pick_group(rng);
      const std::size_t ia = pick_member(rng);
      const std::size_t ib = pick_member(rng);
      const std::size_t a = cur[ga][ia];
      const std::size_t b = cur[gb][ib];
      double delta = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        if (k != ia) delta += s(b, cur[ga][k]) - s(a, cur[ga][k]);
        if (k != ib) delta += s(a, cur[gb][k]) - s(b, cur[gb][k]);
      }
      const bool accept =
          delta > 0.0 || (cfg.temperature > 0.0 && unit(rng) < std::exp(delta / cfg.temperature));
      if (accept) {
        std::swap(cur[ga][ia], cur[gb][ib]);
        cur_score += delta;
        if (cur_score > out.best_score) {
          out.best = cur;
          out.best_score = cur_score;
        }
      }
      out.trace.push_back(cur_score);
    }
    // Exact rescoring so cross-epoch comparison does not depend on accumulated deltas.
    out.best = canonical(std::move(out.best));
    out.best_score = 0.0;
    for (const auto& g : out.best) out.best_score += group_score(g, s);
  }

  std::size_t winner = 0;
  for (std::size_t e = 1; e < epochs.size(); ++e) {
    const auto& c = epochs[e];
    const auto& w = epochs[winner];
    if (c.best_score > w.best_score || (c.best_score == w.best_score && c.sub_seed < w.sub_seed)) winner = e;
  }
  SearchResult result;
  result.best.groups = epochs[winner].best;
  result.best.score = score_grouping(result.best.groups, sim);
  for (auto& e : epochs) result.traces.push_back(std::move(e.trace));
  return result;
}

double count_partitions(std::size_t n_heads, std::size_t n_groups) {
  check_divisible(n_heads, n_groups);
  const std::size_t d = n_heads / n_groups;
  // n! / ((d!)^G G!) in log space.
  const double log_count = std::lgamma(static_cast<double>(n_heads) + 1.0) -
                           static_cast<double>(n_groups) * std::lgamma(static_cast<double>(d) + 1.0) -
                           std::lgamma(static_cast<double>(n_groups) + 1.0);
  return std::round(std::exp(log_count));
}

ExhaustiveResult exhaustive_grouping(const SimilarityMatrix& sim, std::size_t n_groups,
                                     const std::function<void(const Partition&, double)>& visit) {
  if (sim.stage != SimilarityStage::kAfter) throw InvalidArgument("exhaustive_grouping: needs after-alignment similarity");
  const std::size_t h = sim.n_heads();
  const double count = count_partitions(h, n_groups);
  if (count > kExhaustiveLimit) {
    throw InvalidArgument("exhaustive grouping of " + std::to_string(h) + " heads into " + std::to_string(n_groups) +
                          " groups needs " + std::to_string(count) + " candidates (limit 1e6)");
  }
  const std::size_t d = h / n_groups;
  ExhaustiveResult result;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<bool> used(h, false);
  Partition cur;
  cur.reserve(n_groups);  // extend() holds a reference to cur.back()

  // Each new group starts with the lowest unused head, so every unlabeled partition appears once.
  std::function<void()> next_group;
  std::function<void(std::size_t)> extend = [&](std::size_t from) {
    auto& g = cur.back();
    if (g.size() == d) {
      next_group();
      return;
    }
    for (std::size_t k = from; k < h; ++k) {
      if (used[k]) continue;
      used[k] = true;
      g.push_back(k);
      extend(k + 1);
      g.pop_back();
      used[k] = false;
    }
  };
  next_group = [&]() {
    const auto first = std::find(used.begin(), used.end(), false);
    if (first == used.end()) {
      double sc = 0.0;
      for (const auto& g : cur) sc += group_score(g, sim.scores);
      ++result.enumerated;
      if (visit) visit(cur, sc);
      if (sc > best) {
        best = sc;
        result.best.groups = cur;
      }
      return;
    }
    const auto f = static_cast<std::size_t>(first - used.begin());
    used[f] = true;
    cur.push_back({f});
    extend(f + 1);
    cur.pop_back();
    used[f] = false;
  };
  next_group();
  result.best.score = best;
  return result;
}

std::vector<std::size_t> partition_permutation(const Partition& p) {
  std::vector<std::size_t> perm;
  for (const auto& g : p) perm.insert(perm.end(), g.begin(), g.end());
  return perm;
}

bool is_contiguous(const Partition& p) {
  const auto perm = partition_permutation(p);
  for (std::size_t k = 0; k < perm.size(); ++k)
    if (perm[k] != k) return false;
  return true;
}

nlohmann::json plan_to_json(const GroupingPlan& plan) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const auto& lg = plan.layers[l];
    layers.push_back({{"layer", l},
                      {"groups", lg.groups},
                      {"score", lg.score ? nlohmann::json(*lg.score) : nlohmann::json(nullptr)}});
  }
  return {{"target", to_string(plan.target)},
          {"criterion", to_string(plan.criterion)},
          {"n_heads", plan.n_heads},
          {"n_groups", plan.n_groups},
          {"layers", layers}};
}

GroupingPlan plan_from_json(const nlohmann::json& j) {
  GroupingPlan plan;
  try {
    plan.target = group_target_from_string(j.at("target").get<std::string>());
    plan.criterion = criterion_from_string(j.at("criterion").get<std::string>());
    plan.n_heads = j.at("n_heads").get<std::size_t>();
    plan.n_groups = j.at("n_groups").get<std::size_t>();
    const auto& layers = j.at("layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& e = layers[l];
      if (e.at("layer").get<std::size_t>() != l) throw InvalidArgument("layers out of order");
      LayerGrouping lg;
      lg.groups = e.at("groups").get<Partition>();
      if (!e.at("score").is_null()) lg.score = e.at("score").get<double>();
      validate_partition(lg.groups, plan.n_heads, plan.n_groups);
      plan.layers.push_back(std::move(lg));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Detail::kCorruptHeader, std::string("malformed grouping plan: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Detail::kShapeMismatch, std::string("invalid grouping plan: ") + e.what());
  }
  return plan;
}

void save_plan(const GroupingPlan& plan, const std::filesystem::path& path) {
  write_json_file(path, plan_to_json(plan));
}

GroupingPlan load_plan(const std::filesystem::path& path) { return plan_from_json(read_json_file(path)); }

}  // namespace mha2gqa
