#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mha2gqa/error.hpp"
#include "mha2gqa/hard_concrete.hpp"
#include "mha2gqa/losses.hpp"
#include "test_support.hpp"

namespace mha2gqa {
namespace {

using testing::random_matrix;

// Central differences of a scalar function of one matrix, compared against `analytic`.
template <typename F>
double fd_relative_error(F f, Matrix x, const Matrix& analytic, double h = 1e-6) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    num += (fd - analytic.data()[i]) * (fd - analytic.data()[i]);
    den += fd * fd;
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

TEST(Losses, KlZeroAtEqualityAndShiftInvariant) {
  std::mt19937_64 rng(1);
  const Matrix t = random_matrix(20, 5, rng);
  EXPECT_NEAR(kl_loss(t, t), 0.0, 1e-15);
  Matrix s = t;
  for (std::size_t c = 0; c < s.cols(); ++c)
    for (std::size_t r = 0; r < s.rows(); ++r) s(r, c) += 3.0 * static_cast<double>(c) - 1.0;
  EXPECT_NEAR(kl_loss(s, t), 0.0, 1e-13);
  EXPECT_NEAR(bild_loss(s, t, 8), 0.0, 1e-13);
}

TEST(Losses, KlHandComputed) {
  const Matrix teacher(3, 1);  // uniform
  const Matrix student = Matrix::from_rows({{2.0}, {0.0}, {0.0}});
  const double e2 = std::exp(2.0);
  const double expected = -std::log(3.0) - 2.0 / 3.0 + std::log(e2 + 2.0);
  EXPECT_NEAR(kl_loss(student, teacher), expected, 1e-14);
}

TEST(Losses, DistillNonNegativeAndZeroAtEquality) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = random_matrix(32, 4, rng, 2.0);
    const Matrix s = random_matrix(32, 4, rng, 2.0);
    EXPECT_GE(distill_loss(s, t, 16), 0.0);
    EXPECT_GE(bild_loss(s, t, 16), 0.0);
    EXPECT_NEAR(distill_loss(t, t, 16), 0.0, 1e-13);
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Matrix t = random_matrix(24, 3, rng, 1.5);
  const Matrix s = random_matrix(24, 3, rng, 1.5);
  Matrix g;
  kl_loss(s, t, &g);
  EXPECT_LT(fd_relative_error([&](const Matrix& x) { return kl_loss(x, t); }, s, g), 1e-7);
  bild_loss(s, t, 6, &g);
  EXPECT_LT(fd_relative_error([&](const Matrix& x) { return bild_loss(x, t, 6); }, s, g), 1e-7);
  distill_loss(s, t, 16, &g);
  EXPECT_LT(fd_relative_error([&](const Matrix& x) { return distill_loss(x, t, 16); }, s, g), 1e-7);
  const std::vector<int> toks{1, 5, 0, 23};
  Matrix s4 = random_matrix(24, 4, rng);
  next_token_loss(s4, toks, &g);
  EXPECT_LT(fd_relative_error([&](const Matrix& x) { return next_token_loss(x, toks); }, s4, g), 1e-7);
}

TEST(Losses, ShapeErrors) {
  EXPECT_THROW(kl_loss(Matrix(3, 2), Matrix(3, 1)), InvalidArgument);
  EXPECT_THROW(bild_loss(Matrix(3, 2), Matrix(3, 2), 4), InvalidArgument);
  EXPECT_THROW(next_token_loss(Matrix(3, 2), std::vector<int>{1}, nullptr), InvalidArgument);
}

TEST(Losses, L0PlugIn) {
  EXPECT_EQ(l0_loss(0.37, 0.37), 0.0);
  EXPECT_EQ(l0_loss(1.0, 0.0), 2.0);
  EXPECT_EQ(l0_loss(0.5, 0.0), 0.75);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> gates(16);
    double sum = 0.0;
    for (auto& z : gates) sum += (z = u(rng));
    const double target = u(rng);
    const double m = sum / 16.0;
    const double diff = m - target;
    EXPECT_NEAR(l0_loss(m, target), (diff < 0 ? -diff : diff) + diff * diff, 1e-15);
    double dm = 0.0;
    l0_loss(m, target, &dm);
    EXPECT_NEAR(dm, (l0_loss(m + 1e-7, target) - l0_loss(m - 1e-7, target)) / 2e-7, 1e-6);
  }
}

TEST(HardConcrete, DeterministicGateInUnitInterval) {
  for (double a = -30; a <= 30; a += 0.25) {
    const double z = hard_concrete::deterministic(a);
    EXPECT_GE(z, 0.0);
    EXPECT_LE(z, 1.0);
  }
  EXPECT_EQ(hard_concrete::deterministic(3.0), 1.0);
  EXPECT_EQ(hard_concrete::deterministic(-3.0), 0.0);
}

TEST(HardConcrete, SaturationLimits) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = hard_concrete::draw_noise(rng);
    EXPECT_EQ(hard_concrete::sample(50.0, u), 1.0);
    EXPECT_EQ(hard_concrete::sample(-50.0, u), 0.0);
  }
  EXPECT_NEAR(hard_concrete::expected(50.0), 1.0, 1e-12);
  EXPECT_NEAR(hard_concrete::expected(-50.0), 0.0, 1e-12);
}

TEST(HardConcrete, ExpectedGateMatchesMonteCarlo) {
  std::mt19937_64 rng(6);
  for (int k = 0; k <= 10; ++k) {
    const double a = -5.0 + k;
    double sum = 0.0;
    constexpr int kSamples = 100000;
    for (int i = 0; i < kSamples; ++i) sum += hard_concrete::sample(a, hard_concrete::draw_noise(rng));
    EXPECT_NEAR(hard_concrete::expected(a), sum / kSamples, 1e-2) << "a=" << a;
  }
}

TEST(HardConcrete, DerivativesMatchFiniteDifferences) {
  for (double a = -4.0; a <= 4.0; a += 0.5) {
    double g = 0.0;
    hard_concrete::expected(a, &g);
    const double fd = (hard_concrete::expected(a + 1e-6) - hard_concrete::expected(a - 1e-6)) / 2e-6;
    EXPECT_NEAR(g, fd, 1e-8);
    for (double u : {0.2, 0.5, 0.8}) {
      const double z = hard_concrete::sample(a, u);
      if (z <= 0.0 || z >= 1.0) {
        EXPECT_EQ(hard_concrete::sample_grad(a, u), 0.0);
        continue;
      }
      const double fds = (hard_concrete::sample(a + 1e-6, u) - hard_concrete::sample(a - 1e-6, u)) / 2e-6;
      EXPECT_NEAR(hard_concrete::sample_grad(a, u), fds, 1e-8);
    }
  }
}

}  // namespace
}  // namespace mha2gqa
