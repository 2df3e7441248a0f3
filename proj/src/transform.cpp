#include "mha2gqa/transform.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mha2gqa/error.hpp"
#include "mha2gqa/kernels.hpp"
#include "mha2gqa/similarity.hpp"

namespace mha2gqa {

namespace {

void check_plan(const GroupingPlan& plan, const ModelConfig& cfg) {
  if (!cfg.is_mha()) throw InvalidArgument("head transforms need an MHA model (n_kv_heads == n_heads)");
  if (plan.n_heads != cfg.n_heads) {
    throw InvalidArgument("plan is for " + std::to_string(plan.n_heads) + " heads, model has " +
                          std::to_string(cfg.n_heads));
  }
  if (plan.layers.size() != cfg.n_layers) {
    throw InvalidArgument("plan covers " + std::to_string(plan.layers.size()) + " layers, model has " +
                          std::to_string(cfg.n_layers));
  }
  for (const auto& l : plan.layers) validate_partition(l.groups, plan.n_heads, plan.n_groups);
}

Matrix permute_row_blocks(const Matrix& m, const std::vector<std::size_t>& perm, std::size_t block) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) out.set_block(k * block, 0, m.block(perm[k] * block, 0, block, m.cols()));
  return out;
}

Matrix permute_col_blocks(const Matrix& m, const std::vector<std::size_t>& perm, std::size_t block) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) out.set_block(0, k * block, m.block(0, perm[k] * block, m.rows(), block));
  return out;
}

std::vector<TokenSeq> random_sequences(const ModelConfig& cfg, std::size_t n_seq, std::size_t len,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  std::vector<TokenSeq> out(n_seq, TokenSeq(len));
  for (auto& s : out)
    for (auto& t : s) t = tok(rng);
  return out;
}

}  // namespace

ModelWeights regroup_heads(const ModelWeights& w, const ModelConfig& cfg, const GroupingPlan& plan) {
  check_plan(plan, cfg);
  w.check_shapes(cfg);
  ModelWeights out = w;
  const std::size_t hd = cfg.head_dim;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto perm = partition_permutation(plan.layers[l].groups);
    auto& lw = out.layers[l];
    lw.wq = permute_row_blocks(w.layers[l].wq, perm, hd);
    lw.wk = permute_row_blocks(w.layers[l].wk, perm, hd);
    lw.wv = permute_row_blocks(w.layers[l].wv, perm, hd);
    lw.wo = permute_col_blocks(w.layers[l].wo, perm, hd);
  }
  return out;
}

KVCacheSet permute_cache(const KVCacheSet& cache, const GroupingPlan& plan) {
  if (plan.layers.size() != cache.n_layers() || plan.n_heads != cache.n_heads()) {
    throw InvalidArgument("cache shape does not match the grouping plan");
  }
  KVCacheSet out = cache;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    validate_partition(plan.layers[l].groups, plan.n_heads, plan.n_groups);
    const auto perm = partition_permutation(plan.layers[l].groups);
    for (std::size_t k = 0; k < perm.size(); ++k) {
      out.keys[l][k] = cache.keys[l][perm[k]];
      out.values[l][k] = cache.values[l][perm[k]];
    }
  }
  return out;
}

AlignResult align_groups(const ModelWeights& w, const ModelConfig& cfg, const KVCacheSet& cache,
                         const GroupingPlan& plan, const AlignOptions& opts) {
  check_plan(plan, cfg);
  w.check_shapes(cfg);
  if (cache.n_layers() != cfg.n_layers || cache.n_heads() != cfg.n_heads) {
    throw InvalidArgument("KV cache has " + std::to_string(cache.n_layers()) + "x" +
                          std::to_string(cache.n_heads()) + " layers x heads, model has " +
                          std::to_string(cfg.n_layers) + "x" + std::to_string(cfg.n_heads));
  }
  for (const auto& layer : cache.keys)
    for (const auto& m : layer)
      if (m.rows() != cfg.head_dim) throw InvalidArgument("KV cache head_dim does not match the model");

  const std::size_t hd = cfg.head_dim;
  const std::size_t d = plan.group_size();
  AlignResult out{w, {}};
  out.transforms.layers.resize(cfg.n_layers);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& lt = out.transforms.layers[l];
    lt.permutation = partition_permutation(plan.layers[l].groups);
    lt.value.assign(cfg.n_heads, Matrix::identity(hd));
    lt.key.assign(cfg.n_heads, BlockRotation::identity(hd, cfg.rope_pairing));
    if (d < 2) continue;

    const auto prep = [&](const Matrix& m) { return opts.criterion == Criterion::kCos ? normalize_columns(m) : m; };
    for (std::size_t g = 0; g < plan.n_groups; ++g) {
      std::vector<Matrix> vs, ks;
      for (std::size_t k = g * d; k < (g + 1) * d; ++k) {
        vs.push_back(prep(cache.values[l][k]));
        ks.push_back(prep(cache.keys[l][k]));
      }
      GpaOptions vopt{false, cfg.rope_pairing, opts.gpa_tol, opts.gpa_max_iter};
      GpaOptions kopt{true, cfg.rope_pairing, opts.gpa_tol, opts.gpa_max_iter};
      const auto vr = generalized_procrustes(vs, vopt);
      const auto kr = generalized_procrustes(ks, kopt);
      for (std::size_t m = 0; m < d; ++m) {
        lt.value[g * d + m] = vr.transforms[m];
        lt.key[g * d + m] = (*kr.rotations)[m];
      }
    }

    auto& lw = out.weights.layers[l];
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const Matrix& q = lt.value[h];
      const Matrix r = lt.key[h].to_matrix();
      lw.wv.set_block(h * hd, 0, kernels::matmul(q, w.layers[l].wv.block(h * hd, 0, hd, cfg.d_model)));
      lw.wo.set_block(0, h * hd, kernels::matmul_nt(w.layers[l].wo.block(0, h * hd, cfg.d_model, hd), q));
      lw.wq.set_block(h * hd, 0, kernels::matmul(r, w.layers[l].wq.block(h * hd, 0, hd, cfg.d_model)));
      lw.wk.set_block(h * hd, 0, kernels::matmul(r, w.layers[l].wk.block(h * hd, 0, hd, cfg.d_model)));
    }
  }
  return out;
}

InvarianceReport verify_invariance(const ModelWeights& before, const ModelConfig& cfg_before,
                                   const ModelWeights& after, const ModelConfig& cfg_after, std::size_t n_seq,
                                   std::size_t seq_len, double tol, std::uint64_t seed) {
  if (cfg_before.vocab_size != cfg_after.vocab_size || cfg_before.d_model != cfg_after.d_model ||
      cfg_before.n_layers != cfg_after.n_layers || cfg_before.n_heads != cfg_after.n_heads ||
      cfg_before.head_dim != cfg_after.head_dim) {
    throw InvalidArgument("verify_invariance: model configs are not comparable");
  }
  if (n_seq == 0 || seq_len == 0) throw InvalidArgument("verify_invariance: need at least one token");
  before.check_shapes(cfg_before);
  after.check_shapes(cfg_after);
  InvarianceReport rep;
  rep.tol = tol;
  double ref_scale = 0.0;
  for (const auto& seq : random_sequences(cfg_before, n_seq, seq_len, seed)) {
    const Matrix a = forward(before, cfg_before, seq);
    const Matrix b = forward(after, cfg_after, seq);
    rep.max_abs = std::max(rep.max_abs, max_abs_diff(a, b));
    ref_scale = std::max(ref_scale, max_abs(a));
  }
  rep.max_rel = ref_scale > 0.0 ? rep.max_abs / ref_scale : rep.max_abs;
  rep.passed = rep.max_abs <= tol;
  return rep;
}

InvarianceReport verify_invariance(const ModelWeights& before, const ModelWeights& after, const ModelConfig& cfg,
                                   std::size_t n_seq, std::size_t seq_len, double tol, std::uint64_t seed) {
  return verify_invariance(before, cfg, after, cfg, n_seq, seq_len, tol, seed);
}

nlohmann::json transforms_to_json(const HeadTransformSet& t) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : t.layers) {
    nlohmann::json values = nlohmann::json::array();
    for (const auto& q : l.value) {
      std::vector<std::vector<double>> rows;
      for (std::size_t r = 0; r < q.rows(); ++r) rows.emplace_back(q.row(r).begin(), q.row(r).end());
      values.push_back(rows);
    }
    nlohmann::json keys = nlohmann::json::array();
    for (const auto& k : l.key) keys.push_back({{"pairing", to_string(k.pairing())}, {"angles", k.angles()}});
    layers.push_back({{"permutation", l.permutation}, {"value", values}, {"key", keys}});
  }
  return {{"layers", layers}};
}

HeadTransformSet transforms_from_json(const nlohmann::json& j) {
  HeadTransformSet t;
  try {
    for (const auto& l : j.at("layers")) {
      LayerHeadTransforms lt;
      lt.permutation = l.at("permutation").get<std::vector<std::size_t>>();
      for (const auto& v : l.at("value")) {
        const auto rows = v.get<std::vector<std::vector<double>>>();
        Matrix q(rows.size(), rows.empty() ? 0 : rows[0].size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != q.cols()) throw InvalidArgument("ragged value transform");
          std::copy(rows[r].begin(), rows[r].end(), q.row(r).begin());
        }
        lt.value.push_back(std::move(q));
      }
      for (const auto& k : l.at("key")) {
        lt.key.emplace_back(k.at("angles").get<std::vector<double>>(),
                            pairing_from_string(k.at("pairing").get<std::string>()));
      }
      t.layers.push_back(std::move(lt));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Detail::kCorruptHeader, std::string("malformed transform set: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Detail::kShapeMismatch, std::string("invalid transform set: ") + e.what());
  }
  return t;
}

}  // namespace mha2gqa
