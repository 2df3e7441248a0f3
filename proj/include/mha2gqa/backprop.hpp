#pragma once

#include <functional>
#include <span>

#include "mha2gqa/model.hpp"

namespace mha2gqa {

// Loss on logits (vocab x T): returns the value and writes d loss / d logits.
using LogitLoss = std::function<double(const Matrix& logits, Matrix& dlogits)>;

// Forward pass, loss, then reverse-mode gradients for every tensor of `w`, added into
// `grad` (shaped like `w`, e.g. ModelWeights::zeros(cfg)). Logits match `forward` exactly.
double loss_and_grad(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens,
                     const LogitLoss& loss, ModelWeights& grad);

// Elementwise helpers over all tensors of two identically shaped weight sets.
void axpy(double alpha, const ModelWeights& x, ModelWeights& y);
double dot(const ModelWeights& a, const ModelWeights& b);

}  // namespace mha2gqa
