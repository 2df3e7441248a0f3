#include "mha2gqa/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mha2gqa/error.hpp"
#include "mha2gqa/kernels.hpp"

namespace mha2gqa {

const char* to_string(RotationPairing p) {
  return p == RotationPairing::kHalfSplit ? "half_split" : "interleaved";
}

RotationPairing pairing_from_string(const std::string& s) {
  if (s == "half_split") return RotationPairing::kHalfSplit;
  if (s == "interleaved") return RotationPairing::kInterleaved;
  throw InvalidArgument("unknown rotation pairing '" + s + "'");
}

BlockRotation::BlockRotation(std::vector<double> angles, RotationPairing pairing)
    : angles_(std::move(angles)), pairing_(pairing) {}

BlockRotation BlockRotation::identity(std::size_t dim, RotationPairing pairing) {
  if (dim % 2 != 0) throw InvalidArgument("BlockRotation: dimension must be even");
  return BlockRotation(std::vector<double>(dim / 2, 0.0), pairing);
}

std::pair<std::size_t, std::size_t> BlockRotation::plane(std::size_t i) const noexcept {
  if (pairing_ == RotationPairing::kHalfSplit) return {i, i + angles_.size()};
  return {2 * i, 2 * i + 1};
}

Matrix BlockRotation::to_matrix() const {
  Matrix r(dim(), dim());
  for (std::size_t i = 0; i < angles_.size(); ++i) {
    const auto [a, b] = plane(i);
    const double c = std::cos(angles_[i]);
    const double s = std::sin(angles_[i]);
    r(a, a) = c;
    r(a, b) = -s;
    r(b, a) = s;
    r(b, b) = c;
  }
  return r;
}

void BlockRotation::apply(Matrix& x) const {
  if (x.rows() != dim()) throw InvalidArgument("BlockRotation::apply: row count mismatch");
  for (std::size_t i = 0; i < angles_.size(); ++i) {
    const auto [a, b] = plane(i);
    const double c = std::cos(angles_[i]);
    const double s = std::sin(angles_[i]);
    auto ra = x.row(a);
    auto rb = x.row(b);
    for (std::size_t n = 0; n < x.cols(); ++n) {
      const double xa = ra[n];
      const double xb = rb[n];
      ra[n] = c * xa - s * xb;
      rb[n] = s * xa + c * xb;
    }
  }
}

BlockRotation BlockRotation::inverse() const {
  std::vector<double> neg(angles_.size());
  std::transform(angles_.begin(), angles_.end(), neg.begin(), [](double a) { return -a; });
  return BlockRotation(std::move(neg), pairing_);
}

BlockRotation BlockRotation::compose(const BlockRotation& other) const {
  if (other.angles_.size() != angles_.size() || other.pairing_ != pairing_) {
    throw InvalidArgument("BlockRotation::compose: incompatible rotations");
  }
  std::vector<double> sum(angles_.size());
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = std::remainder(angles_[i] + other.angles_[i], 2.0 * M_PI);
  return BlockRotation(std::move(sum), pairing_);
}

namespace {

// Completes the columns listed in `missing` so that u has orthonormal columns.
void complete_basis(Matrix& u, const std::vector<std::size_t>& missing) {
  const std::size_t m = u.rows();
  std::vector<bool> is_missing(u.cols(), false);
  for (auto j : missing) is_missing[j] = true;
  for (auto j : missing) {
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<double> v(m, 0.0);
      v[k] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < u.cols(); ++c) {
          if (is_missing[c]) continue;
          double d = 0.0;
          for (std::size_t r = 0; r < m; ++r) d += u(r, c) * v[r];
          for (std::size_t r = 0; r < m; ++r) v[r] -= d * u(r, c);
        }
      }
      const double nrm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(v);
      }
    }
    for (std::size_t r = 0; r < m; ++r) u(r, j) = best[r] / best_norm;
    is_missing[j] = false;
  }
}

// One-sided Jacobi (Hestenes) for rows >= cols.
SvdResult jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Work on columns: store the transpose so each column is a contiguous row.
  Matrix w = a.transposed();  // n x m
  Matrix v = Matrix::identity(n);  // rows of v are columns of V
  constexpr double kEps = std::numeric_limits<double>::epsilon();
  constexpr int kMaxSweeps = 80;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto wp = w.row(p);
        auto wq = w.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          alpha += wp[r] * wp[r];
          beta += wq[r] * wq[r];
          gamma += wp[r] * wq[r];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < m; ++r) {
          const double xp = wp[r];
          const double xq = wq[r];
          wp[r] = c * xp - s * xq;
          wq[r] = s * xp + c * xq;
        }
        auto vp = v.row(p);
        auto vq = v.row(q);
        for (std::size_t r = 0; r < n; ++r) {
          const double xp = vp[r];
          const double xq = vq[r];
          vp[r] = c * xp - s * xq;
          vq[r] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto wj = w.row(j);
    norms[j] = std::sqrt(std::inner_product(wj.begin(), wj.end(), wj.begin(), 0.0));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return norms[x] > norms[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double smax = n > 0 ? norms[order[0]] : 0.0;
  const double rank_tol = smax * static_cast<double>(std::max(m, n)) * kEps;
  std::vector<std::size_t> missing;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = norms[j];
    auto wj = w.row(j);
    if (norms[j] > rank_tol && norms[j] > 0.0) {
      for (std::size_t r = 0; r < m; ++r) out.u(r, k) = wj[r] / norms[j];
    } else {
      missing.push_back(k);
    }
    auto vj = v.row(j);
    std::copy(vj.begin(), vj.end(), out.vt.row(k).begin());
  }
  if (!missing.empty()) complete_basis(out.u, missing);
  return out;
}

}  // namespace

SvdResult svd(const Matrix& a) {
  if (a.empty()) throw InvalidArgument("svd: empty matrix");
  if (!a.all_finite()) throw InvalidArgument("svd: input contains non-finite entries");
  if (a.rows() >= a.cols()) return jacobi_svd_tall(a);
  SvdResult t = jacobi_svd_tall(a.transposed());
  return {t.vt.transposed(), std::move(t.s), t.u.transposed()};
}

OrthogonalTransform orthogonal_procrustes(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw InvalidArgument("orthogonal_procrustes: shape mismatch");
  if (x.empty()) throw InvalidArgument("orthogonal_procrustes: empty input");
  // y x^T = U S V^T; the trace-maximizing q is U V^T.
  const SvdResult d = svd(kernels::matmul_nt(y, x));
  return {kernels::matmul(d.u, d.vt)};
}

BlockRotation rotation_procrustes_2d_blocks(const Matrix& x, const Matrix& y, RotationPairing pairing) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw InvalidArgument("rotation_procrustes_2d_blocks: shape mismatch");
  if (x.rows() % 2 != 0) throw InvalidArgument("rotation_procrustes_2d_blocks: head dimension must be even");
  BlockRotation frame = BlockRotation::identity(x.rows(), pairing);
  std::vector<double> angles(x.rows() / 2);
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const auto [a, b] = frame.plane(i);
    const auto xa = x.row(a), xb = x.row(b), ya = y.row(a), yb = y.row(b);
    double dot = 0.0, cross = 0.0;
    for (std::size_t n = 0; n < x.cols(); ++n) {
      dot += xa[n] * ya[n] + xb[n] * yb[n];
      cross += xa[n] * yb[n] - xb[n] * ya[n];
    }
    angles[i] = (dot == 0.0 && cross == 0.0) ? 0.0 : std::atan2(cross, dot);
  }
  return BlockRotation(std::move(angles), pairing);
}

namespace {

Matrix mean_of(std::span<const Matrix> ys) {
  Matrix m(ys[0].rows(), ys[0].cols());
  for (const auto& y : ys) m += y;
  m *= 1.0 / static_cast<double>(ys.size());
  return m;
}

double residual(std::span<const Matrix> ys, const Matrix& mean) {
  double r = 0.0;
  for (const auto& y : ys) {
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double d = y.data()[k] - mean.data()[k];
      r += d * d;
    }
  }
  return r;
}

}  // namespace

GpaResult generalized_procrustes(std::span<const Matrix> xs, const GpaOptions& opts) {
  if (xs.empty()) throw InvalidArgument("generalized_procrustes: empty input list");
  if (opts.max_iter < 1) throw InvalidArgument("generalized_procrustes: max_iter must be >= 1");
  for (const auto& x : xs) {
    if (x.rows() != xs[0].rows() || x.cols() != xs[0].cols()) {
      throw InvalidArgument("generalized_procrustes: inputs differ in shape");
    }
  }
  const std::size_t d = xs[0].rows();
  if (opts.constrained && d % 2 != 0) throw InvalidArgument("generalized_procrustes: odd dimension in constrained mode");

  std::vector<Matrix> ys(xs.begin(), xs.end());
  GpaResult out;
  out.transforms.assign(xs.size(), Matrix::identity(d));
  std::vector<BlockRotation> rots;
  if (opts.constrained) rots.assign(xs.size(), BlockRotation::identity(d, opts.pairing));

  Matrix mean = mean_of(ys);
  out.residual_history.push_back(residual(ys, mean));

  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (opts.constrained) {
        const BlockRotation r = rotation_procrustes_2d_blocks(ys[i], mean, opts.pairing);
        r.apply(ys[i]);
        rots[i] = r.compose(rots[i]);
      } else {
        const OrthogonalTransform q = orthogonal_procrustes(ys[i], mean);
        ys[i] = kernels::matmul(q.q, ys[i]);
        out.transforms[i] = kernels::matmul(q.q, out.transforms[i]);
      }
    }
    mean = mean_of(ys);
    const double prev = out.residual_history.back();
    const double cur = residual(ys, mean);
    out.residual_history.push_back(cur);
    out.iterations = it + 1;
    if (std::abs(prev - cur) <= opts.tol * std::max(1.0, prev)) {
      out.converged = true;
      break;
    }
  }

  if (opts.constrained) {
    for (std::size_t i = 0; i < rots.size(); ++i) out.transforms[i] = rots[i].to_matrix();
    out.rotations = std::move(rots);
  }
  out.mean_shape = std::move(mean);
  return out;
}

}  // namespace mha2gqa
