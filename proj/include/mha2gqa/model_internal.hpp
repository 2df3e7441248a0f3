#pragma once

// Building blocks shared by the inference path and the training path.

#include <span>
#include <vector>

#include "mha2gqa/matrix.hpp"
#include "mha2gqa/model.hpp"

namespace mha2gqa::detail {

Matrix embed(const Matrix& embedding, std::span<const int> tokens);

// y[:, t] = x[:, t] * inv_rms[t] * scale; inv_rms optionally returned for backprop.
Matrix rms_norm(const Matrix& x, const Matrix& scale, double eps, std::vector<double>* inv_rms);

// Causal softmax attention over RoPE-rotated q (n_heads*hd x T) and k, v (n_kv*hd x T).
// `probs`, when given, receives the T x T attention matrix of every query head.
void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, const ModelConfig& cfg, Matrix& out,
                      std::vector<Matrix>* probs);

double silu(double x);

}  // namespace mha2gqa::detail
