#include <gtest/gtest.h>

#include <cmath>

#include "mha2gqa/error.hpp"
#include "mha2gqa/model.hpp"
#include "test_support.hpp"

namespace mha2gqa {
namespace {

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = dist(rng);
  return t;
}

TEST(Model, ForwardIsDeterministic) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 1);
  const std::vector<int> tokens{1, 5, 9, 200, 3, 3, 7};
  const Matrix a = forward(w, cfg, tokens);
  const Matrix b = forward(w, cfg, tokens);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.all_finite());
}

TEST(Model, SingleTokenShape) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 2);
  const Matrix logits = forward(w, cfg, std::vector<int>{42});
  EXPECT_EQ(logits.rows(), cfg.vocab_size);
  EXPECT_EQ(logits.cols(), 1u);
}

TEST(Model, RejectsBadTokens) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 3);
  EXPECT_THROW(forward(w, cfg, std::vector<int>{1, 256}), InvalidArgument);
  EXPECT_THROW(forward(w, cfg, std::vector<int>{-1}), InvalidArgument);
  EXPECT_THROW(forward(w, cfg, std::vector<int>{}), InvalidArgument);
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg = toy_config();
  cfg.n_kv_heads = 3;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = toy_config();
  cfg.head_dim = 7;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Model, BatchedForwardMatchesPerHeadSum) {
  std::mt19937_64 rng(4);
  for (std::size_t kv : {8u, 2u}) {
    ModelConfig cfg = toy_config();
    cfg.n_kv_heads = kv;
    const auto w = init_random_weights(cfg, 5 + kv);
    const auto tokens = random_tokens(12, cfg.vocab_size, rng);
    EXPECT_LT(max_abs_diff(forward(w, cfg, tokens), forward_reference(w, cfg, tokens)), 1e-12);
  }
}

TEST(Model, GqaEqualsMhaWithReplicatedKvHeads) {
  std::mt19937_64 rng(6);
  ModelConfig gqa_cfg = toy_config();
  gqa_cfg.n_kv_heads = 2;
  const auto gqa = init_random_weights(gqa_cfg, 7);
  ModelConfig mha_cfg = toy_config();
  ModelWeights mha = ModelWeights::zeros(mha_cfg);
  mha.embedding = gqa.embedding;
  mha.final_norm = gqa.final_norm;
  mha.lm_head = gqa.lm_head;
  const std::size_t hd = mha_cfg.head_dim;
  for (std::size_t l = 0; l < mha.layers.size(); ++l) {
    LayerWeights layer = gqa.layers[l];
    layer.wk = Matrix(mha_cfg.n_heads * hd, mha_cfg.d_model);
    layer.wv = layer.wk;
    for (std::size_t h = 0; h < mha_cfg.n_heads; ++h) {
      const std::size_t g = h / gqa_cfg.group_size();
      layer.wk.set_block(h * hd, 0, gqa.layers[l].wk.block(g * hd, 0, hd, mha_cfg.d_model));
      layer.wv.set_block(h * hd, 0, gqa.layers[l].wv.block(g * hd, 0, hd, mha_cfg.d_model));
    }
    mha.layers[l] = layer;
  }
  const auto tokens = random_tokens(10, 256, rng);
  EXPECT_LT(max_abs_diff(forward(gqa, gqa_cfg, tokens), forward(mha, mha_cfg, tokens)), 1e-12);
}

TEST(Rope, CompositionAndRelativePosition) {
  const RopeTable rope(8, 10000.0, RotationPairing::kHalfSplit);
  std::mt19937_64 rng(8);
  for (auto [s, t] : {std::pair{0u, 0u}, std::pair{3u, 11u}, std::pair{17u, 5u}}) {
    const Matrix rs = rope.rotation(s).to_matrix();
    const Matrix rt = rope.rotation(t).to_matrix();
    EXPECT_LT(orthogonality_error(rs), 1e-12);
    EXPECT_LT(max_abs_diff(testing::naive_matmul(rs, rt), rope.rotation(s + t).to_matrix()), 1e-12);
    const Matrix q = testing::random_matrix(8, 1, rng);
    const Matrix k = testing::random_matrix(8, 1, rng);
    const Matrix lhs = testing::naive_matmul(testing::naive_matmul(rs, q).transposed(), testing::naive_matmul(rt, k));
    // R_s^T R_t is the rotation by (t - s), which may be negative.
    BlockRotation rel = rope.rotation(t).compose(rope.rotation(s).inverse());
    const Matrix rhs = testing::naive_matmul(q.transposed(), testing::naive_matmul(rel.to_matrix(), k));
    EXPECT_NEAR(lhs(0, 0), rhs(0, 0), 1e-12);
  }
}

TEST(CollectKv, CountsTokensAcrossSequences) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 9);
  std::mt19937_64 rng(10);
  const std::vector<TokenSeq> calib{random_tokens(8, 256, rng), random_tokens(8, 256, rng)};
  const auto cache = collect_kv(w, cfg, calib);
  EXPECT_EQ(cache.n_tokens, 16u);
  EXPECT_EQ(cache.n_layers(), 2u);
  EXPECT_EQ(cache.n_heads(), 8u);
  EXPECT_EQ(cache.keys[1][3].rows(), 8u);
  EXPECT_EQ(cache.keys[1][3].cols(), 16u);
}

TEST(CollectKv, ZeroValueWeightsGiveZeroValues) {
  const auto cfg = toy_config();
  auto w = init_random_weights(cfg, 11);
  for (auto& l : w.layers) l.wv.fill(0.0);
  const auto cache = collect_kv(w, cfg, std::vector<TokenSeq>{{1, 2, 3}});
  for (const auto& layer : cache.values)
    for (const auto& v : layer) EXPECT_EQ(max_abs(v), 0.0);
}

TEST(CollectKv, KeysArePreRope) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 12);
  const TokenSeq seq{5, 5, 5, 5};
  const auto cache = collect_kv(w, cfg, std::vector<TokenSeq>{seq});
  // Layer 0 sees the same embedding at every position, so pre-RoPE keys repeat.
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t i = 0; i < cfg.head_dim; ++i) EXPECT_EQ(cache.keys[0][0](i, t), cache.keys[0][0](i, 0));
}

TEST(CollectKv, RejectsEmptyCalibration) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 13);
  EXPECT_THROW(collect_kv(w, cfg, std::vector<TokenSeq>{}), InvalidArgument);
}

}  // namespace
}  // namespace mha2gqa
