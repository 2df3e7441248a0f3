#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mha2gqa/matrix.hpp"

namespace mha2gqa {

// Thin SVD a = u * diag(s) * vt with k = min(rows, cols):
// u is rows x k with orthonormal columns, vt is k x cols with orthonormal rows,
// s is non-negative and sorted descending.
struct SvdResult {
  Matrix u;
  std::vector<double> s;
  Matrix vt;
};

// Square orthogonal matrix q (q^T q = I).
struct OrthogonalTransform {
  Matrix q;
};

// How the coordinates of a head_dim-vector are paired into 2D planes.
// kHalfSplit pairs i with i + d/2 (the RoPE layout used by the model);
// kInterleaved pairs 2i with 2i + 1.
enum class RotationPairing { kHalfSplit, kInterleaved };

const char* to_string(RotationPairing p);
RotationPairing pairing_from_string(const std::string& s);

// Block-diagonal product of d/2 planar rotations, one angle per plane.
class BlockRotation {
 public:
  BlockRotation() = default;
  BlockRotation(std::vector<double> angles, RotationPairing pairing);
  static BlockRotation identity(std::size_t dim, RotationPairing pairing);

  std::size_t dim() const noexcept { return angles_.size() * 2; }
  const std::vector<double>& angles() const noexcept { return angles_; }
  RotationPairing pairing() const noexcept { return pairing_; }

  // Coordinates (first, second) of plane `i`.
  std::pair<std::size_t, std::size_t> plane(std::size_t i) const noexcept;

  Matrix to_matrix() const;
  // Rotates every column of x (dim x N) in place.
  void apply(Matrix& x) const;
  BlockRotation inverse() const;
  // Returns this * other (apply `other` first).
  BlockRotation compose(const BlockRotation& other) const;

 private:
  std::vector<double> angles_;
  RotationPairing pairing_ = RotationPairing::kHalfSplit;
};

SvdResult svd(const Matrix& a);

// Orthogonal q minimizing ||q x - y||_F, i.e. maximizing trace(q^T y x^T).
OrthogonalTransform orthogonal_procrustes(const Matrix& x, const Matrix& y);

// Per-plane rotation maximizing sum_n <R x_n, y_n> restricted to the given pairing.
BlockRotation rotation_procrustes_2d_blocks(const Matrix& x, const Matrix& y,
                                            RotationPairing pairing = RotationPairing::kHalfSplit);

struct GpaOptions {
  bool constrained = false;  // use per-plane rotations instead of the full orthogonal group
  RotationPairing pairing = RotationPairing::kHalfSplit;
  double tol = 1e-8;
  std::size_t max_iter = 100;
};

struct GpaResult {
  std::vector<Matrix> transforms;                           // accumulated per-input transform (matrix form)
  std::optional<std::vector<BlockRotation>> rotations;      // set when constrained
  Matrix mean_shape;
  // sum_i ||Y_i - M||_F^2 before the first iteration and after every iteration.
  std::vector<double> residual_history;
  std::size_t iterations = 0;
  bool converged = false;
};

GpaResult generalized_procrustes(std::span<const Matrix> xs, const GpaOptions& opts = {});

}  // namespace mha2gqa
