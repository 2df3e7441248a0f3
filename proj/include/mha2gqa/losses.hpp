#pragma once

#include <span>

#include "mha2gqa/matrix.hpp"

namespace mha2gqa {

// All losses take logits as vocab x positions, average over positions, and
// optionally write the gradient with respect to `student` (same shape).

// KL(teacher || student) of the softmax distributions.
double kl_loss(const Matrix& student, const Matrix& teacher, Matrix* dstudent = nullptr);

// Symmetric KL between softmaxes of all ordered pairwise logit differences at the
// teacher's top-k positions (ties broken by lower index).
double bild_loss(const Matrix& student, const Matrix& teacher, std::size_t k, Matrix* dstudent = nullptr);

// kl_loss + bild_loss with equal weights.
double distill_loss(const Matrix& student, const Matrix& teacher, std::size_t k, Matrix* dstudent = nullptr);

// Mean next-token cross entropy: position t predicts tokens[t + 1].
double next_token_loss(const Matrix& logits, std::span<const int> tokens, Matrix* dlogits = nullptr);

// |m - T| + (m - T)^2 on the mean gate m; *dmean receives d loss / d m.
double l0_loss(double mean_gate, double target, double* dmean = nullptr);

}  // namespace mha2gqa
