#include <gtest/gtest.h>

#include "mha2gqa/kernels.hpp"
#include "test_support.hpp"

namespace mha2gqa {
namespace {

using testing::naive_matmul;
using testing::random_matrix;

TEST(Kernels, ThreadedMatchesSerialBitForBit) {
  std::mt19937_64 rng(7);
  for (auto [m, k, n] : {std::tuple{3, 5, 7}, std::tuple{64, 64, 128}, std::tuple{257, 64, 33}}) {
    const Matrix a = random_matrix(m, k, rng);
    const Matrix b = random_matrix(k, n, rng);
    const Matrix bt = b.transposed();
    const Matrix at = a.transposed();
    Matrix c1, c2;
    kernels::gemm_nn(a, b, c1);
    kernels::serial::gemm_nn(a, b, c2);
    EXPECT_EQ(c1, c2);
    kernels::gemm_tn(at, b, c1);
    kernels::serial::gemm_tn(at, b, c2);
    EXPECT_EQ(c1, c2);
    kernels::gemm_nt(a, bt, c1);
    kernels::serial::gemm_nt(a, bt, c2);
    EXPECT_EQ(c1, c2);
  }
}

TEST(Kernels, AgreeWithNaiveProduct) {
  std::mt19937_64 rng(11);
  const Matrix a = random_matrix(9, 13, rng);
  const Matrix b = random_matrix(13, 6, rng);
  const Matrix ref = naive_matmul(a, b);
  EXPECT_LT(max_abs_diff(kernels::matmul(a, b), ref), 1e-13);
  EXPECT_LT(max_abs_diff(kernels::matmul_tn(a.transposed(), b), ref), 1e-13);
  EXPECT_LT(max_abs_diff(kernels::matmul_nt(a, b.transposed()), ref), 1e-13);
}

TEST(Kernels, AccumulateAddsIntoOutput) {
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(4, 4, rng);
  const Matrix b = random_matrix(4, 4, rng);
  Matrix c = Matrix::identity(4);
  kernels::gemm_nn(a, b, c, true);
  EXPECT_LT(max_abs_diff(c, naive_matmul(a, b) + Matrix::identity(4)), 1e-13);
}

TEST(Kernels, RejectsShapeMismatch) {
  Matrix c;
  EXPECT_THROW(kernels::gemm_nn(Matrix(2, 3), Matrix(2, 3), c), std::exception);
  Matrix acc(5, 5);
  EXPECT_THROW(kernels::gemm_nn(Matrix(2, 3), Matrix(3, 2), acc, true), std::exception);
}

}  // namespace
}  // namespace mha2gqa
