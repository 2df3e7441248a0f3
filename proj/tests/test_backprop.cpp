#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mha2gqa/backprop.hpp"
#include "mha2gqa/losses.hpp"
#include "test_support.hpp"

namespace mha2gqa {
namespace {

ModelConfig tiny_config(std::size_t n_kv) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.head_dim = 4;
  cfg.n_layers = 2;
  cfg.d_ff = 24;
  cfg.vocab_size = 32;
  cfg.n_kv_heads = n_kv;
  return cfg;
}

// Non-trivial norm scales so their gradients are exercised.
ModelWeights perturbed_weights(const ModelConfig& cfg, std::uint64_t seed) {
  auto w = init_random_weights(cfg, seed);
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<double> u(0.7, 1.3);
  for (auto& l : w.layers) {
    for (auto& v : l.attn_norm.data()) v = u(rng);
    for (auto& v : l.ffn_norm.data()) v = u(rng);
  }
  for (auto& v : w.final_norm.data()) v = u(rng);
  return w;
}

void check_gradients(const ModelConfig& cfg) {
  const auto w = perturbed_weights(cfg, 3);
  const std::vector<int> tokens{3, 17, 9, 9, 30, 1};
  std::mt19937_64 rng(4);
  const Matrix target = testing::random_matrix(cfg.vocab_size, tokens.size(), rng);
  const LogitLoss loss = [&](const Matrix& logits, Matrix& d) { return distill_loss(logits, target, 8, &d); };

  ModelWeights grad = ModelWeights::zeros(cfg);
  loss_and_grad(w, cfg, tokens, loss, grad);

  const auto eval = [&](const ModelWeights& x) { return distill_loss(forward(x, cfg, tokens), target, 8); };
  ModelWeights probe = w;
  std::vector<const Matrix*> grads;
  grad.for_each_tensor([&](const std::string&, const Matrix& m) { grads.push_back(&m); });
  std::size_t idx = 0;
  probe.for_each_tensor([&](const std::string& name, Matrix& m) {
    const Matrix& g = *grads[idx++];
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + 1e-5;
      const double up = eval(probe);
      m.data()[i] = keep - 1e-5;
      const double down = eval(probe);
      m.data()[i] = keep;
      const double fd = (up - down) / 2e-5;
      num += (fd - g.data()[i]) * (fd - g.data()[i]);
      den += fd * fd;
    }
    EXPECT_LT(std::sqrt(num / den), 1e-6) << name;
  });
}

TEST(Backprop, LogitsMatchForward) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 1);
  const std::vector<int> tokens{1, 2, 3, 200, 7};
  Matrix seen;
  ModelWeights grad = ModelWeights::zeros(cfg);
  loss_and_grad(w, cfg, tokens,
                [&](const Matrix& logits, Matrix& d) {
                  seen = logits;
                  d = Matrix(logits.rows(), logits.cols());
                  return 0.0;
                },
                grad);
  EXPECT_TRUE(seen == forward(w, cfg, tokens));
}

TEST(Backprop, MhaGradientsMatchFiniteDifferences) { check_gradients(tiny_config(4)); }

TEST(Backprop, GqaGradientsMatchFiniteDifferences) { check_gradients(tiny_config(2)); }

TEST(Backprop, GradientsAccumulate) {
  const auto cfg = tiny_config(4);
  const auto w = init_random_weights(cfg, 5);
  const std::vector<int> tokens{1, 2, 3};
  const LogitLoss loss = [&](const Matrix& logits, Matrix& d) { return next_token_loss(logits, tokens, &d); };
  ModelWeights once = ModelWeights::zeros(cfg), twice = ModelWeights::zeros(cfg);
  loss_and_grad(w, cfg, tokens, loss, once);
  loss_and_grad(w, cfg, tokens, loss, twice);
  loss_and_grad(w, cfg, tokens, loss, twice);
  axpy(-2.0, once, twice);
  EXPECT_LT(std::sqrt(dot(twice, twice)), 1e-12);
}

}  // namespace
}  // namespace mha2gqa
