#include "mha2gqa/hard_concrete.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/quadrature/gauss.hpp>

namespace mha2gqa::hard_concrete {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p) - std::log1p(-p); }

constexpr double kSpan = kZeta - kGamma;

}  // namespace

double sample(double a, double u) {
  const double s = sigmoid((logit(u) + a) / kBeta);
  return std::clamp(s * kSpan + kGamma, 0.0, 1.0);
}

double sample_grad(double a, double u) {
  const double s = sigmoid((logit(u) + a) / kBeta);
  const double z = s * kSpan + kGamma;
  if (z <= 0.0 || z >= 1.0) return 0.0;
  return kSpan * s * (1.0 - s) / kBeta;
}

double deterministic(double a) { return std::clamp(sigmoid(a) * kSpan + kGamma, 0.0, 1.0); }

double expected(double a, double* grad) {
  // Substitute t = logit(u): the gate is strictly inside (0, 1) for t in [t0, t1],
  // exactly 1 above t1 and 0 below t0.
  const double t0 = kBeta * logit(-kGamma / kSpan) - a;
  const double t1 = kBeta * logit((1.0 - kGamma) / kSpan) - a;
  const auto density = [](double t) {
    const double s = sigmoid(t);
    return s * (1.0 - s);
  };
  using Rule = boost::math::quadrature::gauss<double, 30>;
  const double inner = Rule::integrate(
      [&](double t) { return (sigmoid((t + a) / kBeta) * kSpan + kGamma) * density(t); }, t0, t1);
  if (grad) {
    *grad = Rule::integrate(
        [&](double t) {
          const double s = sigmoid((t + a) / kBeta);
          return kSpan * s * (1.0 - s) / kBeta * density(t);
        },
        t0, t1);
  }
  return inner + 1.0 - sigmoid(t1);
}

double draw_noise(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
  return u(rng);
}

}  // namespace mha2gqa::hard_concrete
