#include "mha2gqa/kernels.hpp"

#include <omp.h>

#include "mha2gqa/error.hpp"

namespace mha2gqa::kernels {
namespace {

void prepare(Matrix& c, std::size_t rows, std::size_t cols, bool accumulate, const char* who) {
  if (accumulate) {
    if (c.rows() != rows || c.cols() != cols) throw InvalidArgument(std::string(who) + ": accumulator shape mismatch");
  } else if (c.rows() != rows || c.cols() != cols) {
    c = Matrix(rows, cols);
  } else {
    c.fill(0.0);
  }
}

// Row kernels shared by the serial and threaded drivers.
inline void row_nn(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  double* out = c.row(i).data();
  const double* arow = a.row(i).data();
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double aik = arow[k];
    if (aik == 0.0) continue;
    const double* brow = b.row(k).data();
    for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
  }
}

inline void row_tn(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t k_dim = a.rows();
  const std::size_t n = b.cols();
  double* out = c.row(i).data();
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double aki = a(k, i);
    if (aki == 0.0) continue;
    const double* brow = b.row(k).data();
    for (std::size_t j = 0; j < n; ++j) out[j] += aki * brow[j];
  }
}

inline void row_nt(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.rows();
  double* out = c.row(i).data();
  const double* arow = a.row(i).data();
  for (std::size_t j = 0; j < n; ++j) {
    const double* brow = b.row(j).data();
    double s = 0.0;
    for (std::size_t k = 0; k < k_dim; ++k) s += arow[k] * brow[k];
    out[j] += s;
  }
}

// Small products stay on the calling thread; forking a team costs more than the work.
constexpr std::size_t kParallelFlops = 1 << 15;

}  // namespace

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols() != b.rows()) throw InvalidArgument("gemm_nn: inner dimension mismatch");
  prepare(c, a.rows(), b.cols(), accumulate, "gemm_nn");
  const auto m = static_cast<long>(a.rows());
  const bool par = a.rows() * a.cols() * b.cols() >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
  for (long i = 0; i < m; ++i) row_nn(a, b, c, static_cast<std::size_t>(i));
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.rows() != b.rows()) throw InvalidArgument("gemm_tn: inner dimension mismatch");
  prepare(c, a.cols(), b.cols(), accumulate, "gemm_tn");
  const auto m = static_cast<long>(a.cols());
  const bool par = a.rows() * a.cols() * b.cols() >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
  for (long i = 0; i < m; ++i) row_tn(a, b, c, static_cast<std::size_t>(i));
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols() != b.cols()) throw InvalidArgument("gemm_nt: inner dimension mismatch");
  prepare(c, a.rows(), b.rows(), accumulate, "gemm_nt");
  const auto m = static_cast<long>(a.rows());
  const bool par = a.rows() * a.cols() * b.rows() >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
  for (long i = 0; i < m; ++i) row_nt(a, b, c, static_cast<std::size_t>(i));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c;
  gemm_nn(a, b, c);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix c;
  gemm_tn(a, b, c);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  Matrix c;
  gemm_nt(a, b, c);
  return c;
}

namespace serial {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols() != b.rows()) throw InvalidArgument("gemm_nn: inner dimension mismatch");
  prepare(c, a.rows(), b.cols(), accumulate, "gemm_nn");
  for (std::size_t i = 0; i < a.rows(); ++i) row_nn(a, b, c, i);
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.rows() != b.rows()) throw InvalidArgument("gemm_tn: inner dimension mismatch");
  prepare(c, a.cols(), b.cols(), accumulate, "gemm_tn");
  for (std::size_t i = 0; i < a.cols(); ++i) row_tn(a, b, c, i);
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols() != b.cols()) throw InvalidArgument("gemm_nt: inner dimension mismatch");
  prepare(c, a.rows(), b.rows(), accumulate, "gemm_nt");
  for (std::size_t i = 0; i < a.rows(); ++i) row_nt(a, b, c, i);
}

}  // namespace serial

void set_num_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace mha2gqa::kernels
