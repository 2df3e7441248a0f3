#pragma once

// Test-only helpers. Nothing here calls into the library's solvers, so the
// oracles built from it stay independent of the code under test.

#include <cmath>
#include <random>
#include <vector>

#include "mha2gqa/matrix.hpp"

namespace mha2gqa::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(r, c);
  for (auto& v : m.data()) v = dist(rng);
  return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Haar-ish random orthogonal matrix via modified Gram-Schmidt on a Gaussian matrix.
inline Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  Matrix g = random_matrix(n, n, rng);
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += g(i, k) * g(i, j);
        for (std::size_t i = 0; i < n; ++i) g(i, j) -= d * g(i, k);
      }
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += g(i, j) * g(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) g(i, j) /= nrm;
  }
  return g;
}

// trace(q^T y x^T) computed elementwise.
inline double procrustes_trace(const Matrix& q, const Matrix& x, const Matrix& y) {
  const Matrix qx = naive_matmul(q, x);
  double t = 0.0;
  for (std::size_t i = 0; i < qx.size(); ++i) t += qx.data()[i] * y.data()[i];
  return t;
}

}  // namespace mha2gqa::testing
