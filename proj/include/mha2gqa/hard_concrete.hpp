#pragma once

#include <random>

namespace mha2gqa::hard_concrete {

// Stretched, clamped binary-concrete gate with the usual L0 constants.
inline constexpr double kBeta = 2.0 / 3.0;
inline constexpr double kGamma = -0.1;
inline constexpr double kZeta = 1.1;

// Gate for uniform noise u in (0, 1) and gate parameter (log-alpha) a.
double sample(double a, double u);
// d sample / d a; zero where the gate is clamped.
double sample_grad(double a, double u);
double deterministic(double a);
// E[sample(a, U)] for U ~ Uniform(0, 1); *grad receives dE/da.
double expected(double a, double* grad = nullptr);

// Uniform noise bounded away from 0 and 1.
double draw_noise(std::mt19937_64& rng);

}  // namespace mha2gqa::hard_concrete
