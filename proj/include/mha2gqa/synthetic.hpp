#pragma once

#include <cstdint>
#include <vector>

#include "mha2gqa/model.hpp"

namespace mha2gqa {

// Sequences that repeat a random pattern of period [min_period, max_period]; each
// token is replaced by a uniform random one with probability `noise`.
struct PatternTask {
  std::size_t vocab_size = 256;
  std::size_t seq_len = 32;
  std::size_t min_period = 2;
  std::size_t max_period = 6;
  double noise = 0.1;
};

std::vector<TokenSeq> make_pattern_data(const PatternTask& task, std::size_t n_seq, std::uint64_t seed);

struct TeacherTraining {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

struct TeacherResult {
  ModelWeights weights;
  std::vector<double> losses;  // mean next-token loss per step
};

// Next-token training with Adam (cosine-decayed learning rate) from `init`.
TeacherResult train_teacher(const ModelWeights& init, const ModelConfig& cfg, const std::vector<TokenSeq>& data,
                            const TeacherTraining& opts);

double mean_next_token_loss(const ModelWeights& w, const ModelConfig& cfg, const std::vector<TokenSeq>& data);

}  // namespace mha2gqa
