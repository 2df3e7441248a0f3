#pragma once

#include "mha2gqa/matrix.hpp"

// Dense matrix-product kernels. The default versions split the output rows across
// OpenMP threads; every output element is still reduced in the same order as the
// serial reference, so both produce bit-identical results for any thread count.
namespace mha2gqa::kernels {

// c (+)= a * b
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// c (+)= a^T * b
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// c (+)= a * b^T
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);

namespace serial {
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
}  // namespace serial

// Caps the OpenMP worker count; 0 leaves the runtime default.
void set_num_threads(int n);
int max_threads();

}  // namespace mha2gqa::kernels
