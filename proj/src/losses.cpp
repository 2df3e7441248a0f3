#include "mha2gqa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mha2gqa/error.hpp"

namespace mha2gqa {

namespace {

void check_pair(const Matrix& s, const Matrix& t) {
  if (s.rows() != t.rows() || s.cols() != t.cols()) {
    throw InvalidArgument("distillation: student logits " + std::to_string(s.rows()) + "x" +
                          std::to_string(s.cols()) + " vs teacher " + std::to_string(t.rows()) + "x" +
                          std::to_string(t.cols()));
  }
  if (s.cols() == 0) throw InvalidArgument("distillation: no positions");
}

// Log-softmax of a vector into `out`.
void log_softmax(std::span<const double> x, std::vector<double>& out) {
  out.resize(x.size());
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lz;
}

std::vector<double> column(const Matrix& m, std::size_t t) {
  std::vector<double> c(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) c[i] = m(i, t);
  return c;
}

}  // namespace

double kl_loss(const Matrix& student, const Matrix& teacher, Matrix* dstudent) {
  check_pair(student, teacher);
  const std::size_t n = student.cols();
  if (dstudent) *dstudent = Matrix(student.rows(), n);
  std::vector<double> ls, lt;
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    log_softmax(column(student, t), ls);
    log_softmax(column(teacher, t), lt);
    double kl = 0.0;
    for (std::size_t i = 0; i < ls.size(); ++i) {
      const double pt = std::exp(lt[i]);
      kl += pt * (lt[i] - ls[i]);
      if (dstudent) (*dstudent)(i, t) = (std::exp(ls[i]) - pt) / static_cast<double>(n);
    }
    total += kl;
  }
  return total / static_cast<double>(n);
}

double bild_loss(const Matrix& student, const Matrix& teacher, std::size_t k, Matrix* dstudent) {
  check_pair(student, teacher);
  if (k < 2 || k > student.rows()) throw InvalidArgument("bild: k must lie in [2, vocab]");
  const std::size_t n = student.cols();
  if (dstudent) *dstudent = Matrix(student.rows(), n);
  const std::size_t m = k * (k - 1);
  std::vector<std::size_t> idx(student.rows());
  std::vector<double> ds(m), dt(m), lqs, lqt, g(m);
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        return teacher(a, t) > teacher(b, t) || (teacher(a, t) == teacher(b, t) && a < b);
                      });
    std::size_t p = 0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        if (a == b) continue;
        ds[p] = student(idx[a], t) - student(idx[b], t);
        dt[p] = teacher(idx[a], t) - teacher(idx[b], t);
        ++p;
      }
    log_softmax(ds, lqs);
    log_softmax(dt, lqt);
    double fwd = 0.0, rev = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      fwd += std::exp(lqt[i]) * (lqt[i] - lqs[i]);
      rev += std::exp(lqs[i]) * (lqs[i] - lqt[i]);
    }
    total += fwd + rev;
    if (!dstudent) continue;
    for (std::size_t i = 0; i < m; ++i) {
      const double qs = std::exp(lqs[i]);
      const double qt = std::exp(lqt[i]);
      g[i] = ((qs - qt) + qs * ((lqs[i] - lqt[i]) - rev)) / static_cast<double>(n);
    }
    p = 0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        if (a == b) continue;
        (*dstudent)(idx[a], t) += g[p];
        (*dstudent)(idx[b], t) -= g[p];
        ++p;
      }
  }
  return total / static_cast<double>(n);
}

double distill_loss(const Matrix& student, const Matrix& teacher, std::size_t k, Matrix* dstudent) {
  Matrix dk, db;
  const double kl = kl_loss(student, teacher, dstudent ? &dk : nullptr);
  const double bild = bild_loss(student, teacher, k, dstudent ? &db : nullptr);
  if (dstudent) {
    dk += db;
    *dstudent = std::move(dk);
  }
  return kl + bild;
}

double next_token_loss(const Matrix& logits, std::span<const int> tokens, Matrix* dlogits) {
  if (logits.cols() != tokens.size()) throw InvalidArgument("next_token_loss: logits/tokens length mismatch");
  if (tokens.size() < 2) throw InvalidArgument("next_token_loss: need at least two tokens");
  const std::size_t n = tokens.size() - 1;
  if (dlogits) *dlogits = Matrix(logits.rows(), logits.cols());
  std::vector<double> ls;
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    log_softmax(column(logits, t), ls);
    const auto target = static_cast<std::size_t>(tokens[t + 1]);
    total -= ls.at(target);
    if (dlogits) {
      for (std::size_t i = 0; i < ls.size(); ++i) (*dlogits)(i, t) = std::exp(ls[i]) / static_cast<double>(n);
      (*dlogits)(target, t) -= 1.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n);
}

double l0_loss(double mean_gate, double target, double* dmean) {
  const double d = mean_gate - target;
  if (dmean) *dmean = (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) + 2.0 * d;
  return std::abs(d) + d * d;
}

}  // namespace mha2gqa
