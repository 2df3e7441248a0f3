#include "mha2gqa/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "mha2gqa/backprop.hpp"
#include "mha2gqa/error.hpp"
#include "mha2gqa/losses.hpp"

namespace mha2gqa {

std::vector<TokenSeq> make_pattern_data(const PatternTask& task, std::size_t n_seq, std::uint64_t seed) {
  if (task.vocab_size < 2 || task.seq_len < 2 || task.min_period < 1 || task.max_period < task.min_period) {
    throw InvalidArgument("pattern task: invalid parameters");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(task.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> period(task.min_period, task.max_period);
  std::bernoulli_distribution flip(task.noise);
  std::vector<TokenSeq> out(n_seq, TokenSeq(task.seq_len));
  for (auto& seq : out) {
    std::vector<int> pattern(period(rng));
    for (auto& p : pattern) p = tok(rng);
    for (std::size_t t = 0; t < seq.size(); ++t) seq[t] = flip(rng) ? tok(rng) : pattern[t % pattern.size()];
  }
  return out;
}

TeacherResult train_teacher(const ModelWeights& init, const ModelConfig& cfg, const std::vector<TokenSeq>& data,
                            const TeacherTraining& opts) {
  if (data.empty()) throw InvalidArgument("train_teacher: no data");
  if (opts.batch_size == 0) throw InvalidArgument("train_teacher: batch_size must be >= 1");
  TeacherResult res{init, {}};
  ModelWeights m = ModelWeights::zeros(cfg), v = ModelWeights::zeros(cfg);
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const double inv_b = 1.0 / static_cast<double>(opts.batch_size);

  for (std::size_t step = 0; step < opts.steps; ++step) {
    ModelWeights g = ModelWeights::zeros(cfg);
    double loss = 0.0;
    for (std::size_t b = 0; b < opts.batch_size; ++b) {
      const auto& seq = data[pick(rng)];
      loss += inv_b * loss_and_grad(res.weights, cfg, seq,
                                    [&](const Matrix& logits, Matrix& d) {
                                      const double l = next_token_loss(logits, seq, &d);
                                      d *= inv_b;
                                      return l;
                                    },
                                    g);
    }
    if (!std::isfinite(loss)) throw DivergenceError("teacher training diverged at step " + std::to_string(step));
    res.losses.push_back(loss);

    const double lr = opts.lr * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(opts.steps)));
    const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(step + 1));
    std::vector<Matrix*> ms, vs, gs;
    m.for_each_tensor([&](const std::string&, Matrix& x) { ms.push_back(&x); });
    v.for_each_tensor([&](const std::string&, Matrix& x) { vs.push_back(&x); });
    g.for_each_tensor([&](const std::string&, Matrix& x) { gs.push_back(&x); });
    std::size_t i = 0;
    res.weights.for_each_tensor([&](const std::string&, Matrix& w) {
      auto mw = ms[i]->data();
      auto vw = vs[i]->data();
      auto gw = gs[i]->data();
      auto ww = w.data();
      for (std::size_t k = 0; k < ww.size(); ++k) {
        mw[k] = opts.beta1 * mw[k] + (1.0 - opts.beta1) * gw[k];
        vw[k] = opts.beta2 * vw[k] + (1.0 - opts.beta2) * gw[k] * gw[k];
        ww[k] -= lr * (mw[k] / c1) / (std::sqrt(vw[k] / c2) + opts.eps);
      }
      ++i;
    });
  }
  return res;
}

double mean_next_token_loss(const ModelWeights& w, const ModelConfig& cfg, const std::vector<TokenSeq>& data) {
  if (data.empty()) throw InvalidArgument("mean_next_token_loss: no data");
  double total = 0.0;
  for (const auto& s : data) total += next_token_loss(forward(w, cfg, s), s);
  return total / static_cast<double>(data.size());
}

}  // namespace mha2gqa
