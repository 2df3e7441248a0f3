#include "mha2gqa/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "mha2gqa/error.hpp"
#include "mha2gqa/kernels.hpp"

namespace mha2gqa {

const char* to_string(CacheTarget t) { return t == CacheTarget::kKey ? "key" : "value"; }
const char* to_string(Criterion c) { return c == Criterion::kCos ? "cos" : "dist"; }
const char* to_string(SimilarityStage s) { return s == SimilarityStage::kOriginal ? "original" : "after"; }

CacheTarget target_from_string(const std::string& s) {
  if (s == "key") return CacheTarget::kKey;
  if (s == "value") return CacheTarget::kValue;
  throw InvalidArgument("unknown cache target '" + s + "' (expected key|value)");
}

Criterion criterion_from_string(const std::string& s) {
  if (s == "cos") return Criterion::kCos;
  if (s == "dist") return Criterion::kDist;
  throw InvalidArgument("unknown criterion '" + s + "' (expected cos|dist)");
}

SimilarityStage stage_from_string(const std::string& s) {
  if (s == "original") return SimilarityStage::kOriginal;
  if (s == "after") return SimilarityStage::kAfter;
  throw InvalidArgument("unknown similarity stage '" + s + "'");
}

PairTransformTable::PairTransformTable(CacheTarget target, std::size_t n_heads, std::size_t head_dim)
    : target_(target),
      n_heads_(n_heads),
      transforms_(n_heads * n_heads, Matrix::identity(head_dim)),
      rotations_(target == CacheTarget::kKey ? n_heads * n_heads : 0,
                 BlockRotation::identity(head_dim, RotationPairing::kHalfSplit)) {}

void PairTransformTable::set(std::size_t i, std::size_t j, Matrix q) { transforms_[i * n_heads_ + j] = std::move(q); }

void PairTransformTable::set_rotation(std::size_t i, std::size_t j, const BlockRotation& r) {
  rotations_[i * n_heads_ + j] = r;
  transforms_[i * n_heads_ + j] = r.to_matrix();
}

Matrix normalize_columns(const Matrix& x) {
  std::vector<double> inv(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t n = 0; n < x.cols(); ++n) inv[n] += row[n] * row[n];
  }
  for (auto& v : inv) v = v > 0.0 ? 1.0 / std::sqrt(v) : 0.0;
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    auto out = y.row(r);
    for (std::size_t n = 0; n < x.cols(); ++n) out[n] = row[n] * inv[n];
  }
  return y;
}

namespace {

struct PairScore {
  double score = 0.0;
  std::size_t skipped = 0;
};

std::vector<double> column_norms(const Matrix& x) {
  std::vector<double> nrm(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t n = 0; n < x.cols(); ++n) nrm[n] += row[n] * row[n];
  }
  for (auto& v : nrm) v = std::sqrt(v);
  return nrm;
}

// Mean cosine between matching columns of a and b, skipping zero-norm tokens.
PairScore mean_cosine(const Matrix& a, const Matrix& b) {
  const auto na = column_norms(a);
  const auto nb = column_norms(b);
  std::vector<double> dots(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ra = a.row(r);
    const auto rb = b.row(r);
    for (std::size_t n = 0; n < a.cols(); ++n) dots[n] += ra[n] * rb[n];
  }
  PairScore out;
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t n = 0; n < a.cols(); ++n) {
    if (na[n] == 0.0 || nb[n] == 0.0) {
      ++out.skipped;
      continue;
    }
    sum += std::clamp(dots[n] / (na[n] * nb[n]), -1.0, 1.0);
    ++valid;
  }
  if (valid == 0) throw InvalidArgument("similarity: every token vector has zero norm for a head pair");
  out.score = sum / static_cast<double>(valid);
  return out;
}

double neg_mean_distance(const Matrix& a, const Matrix& b) {
  std::vector<double> d2(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ra = a.row(r);
    const auto rb = b.row(r);
    for (std::size_t n = 0; n < a.cols(); ++n) {
      const double d = ra[n] - rb[n];
      d2[n] += d * d;
    }
  }
  double sum = 0.0;
  for (double v : d2) sum += std::sqrt(v);
  return -sum / static_cast<double>(a.cols());
}

struct PairFit {
  Matrix q;
  BlockRotation rot;
  Matrix moved(const Matrix& x) const { return kernels::matmul(q, x); }
};

PairFit solve_pair(const Matrix& x, const Matrix& y, CacheTarget target, RotationPairing pairing) {
  PairFit f;
  if (target == CacheTarget::kKey) {
    f.rot = rotation_procrustes_2d_blocks(x, y, pairing);
    f.q = f.rot.to_matrix();
  } else {
    f.q = orthogonal_procrustes(x, y).q;
  }
  return f;
}

// The least-squares fit does not always minimize the mean (unsquared) distance and
// can even lose to the identity. Start from the better of the two and run
// majorize-minimize steps: a Procrustes fit with tokens weighted by 1/residual never
// increases the sum of distances.
PairFit refine_distance_fit(const Matrix& x, const Matrix& y, PairFit start, CacheTarget target,
                            RotationPairing pairing) {
  PairFit best = std::move(start);
  double best_d = -neg_mean_distance(y, best.moved(x));
  {
    PairFit id;
    id.q = Matrix::identity(x.rows());
    if (target == CacheTarget::kKey) id.rot = BlockRotation::identity(x.rows(), pairing);
    const double d = -neg_mean_distance(y, x);
    if (d < best_d) {
      best = std::move(id);
      best_d = d;
    }
  }
  constexpr int kMaxSteps = 100;
  for (int step = 0; step < kMaxSteps && best_d > 0.0; ++step) {
    const Matrix moved = best.moved(x);
    Matrix wx = x, wy = y;
    const double floor = 1e-12 * best_d;
    for (std::size_t n = 0; n < x.cols(); ++n) {
      double r2 = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) r2 += (y(r, n) - moved(r, n)) * (y(r, n) - moved(r, n));
      const double s = 1.0 / std::sqrt(std::max(std::sqrt(r2), floor));
      for (std::size_t r = 0; r < x.rows(); ++r) {
        wx(r, n) *= s;
        wy(r, n) *= s;
      }
    }
    PairFit next = solve_pair(wx, wy, target, pairing);
    const double d = -neg_mean_distance(y, next.moved(x));
    if (!(d < best_d - 1e-15 * best_d)) break;
    best = std::move(next);
    best_d = d;
  }
  return best;
}

void check_heads(std::span<const Matrix> heads) {
  if (heads.empty()) throw InvalidArgument("similarity: no heads");
  const auto n = heads[0].cols();
  if (n == 0) throw InvalidArgument("similarity: cache has no tokens");
  for (const auto& h : heads) {
    if (h.rows() != heads[0].rows() || h.cols() != n) throw InvalidArgument("similarity: heads differ in shape");
  }
  bool any_nonzero = false;
  for (const auto& h : heads) any_nonzero = any_nonzero || max_abs(h) > 0.0;
  if (!any_nonzero) throw InvalidArgument("similarity: cache is all zeros");
}

std::vector<std::pair<std::size_t, std::size_t>> upper_pairs(std::size_t h) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = i + 1; j < h; ++j) pairs.emplace_back(i, j);
  return pairs;
}

SimilarityMatrix blank(std::size_t layer, CacheTarget target, Criterion criterion, SimilarityStage stage,
                       std::size_t h) {
  SimilarityMatrix m{layer, target, criterion, stage, Matrix(h, h), 0};
  const double diag = criterion == Criterion::kCos ? 1.0 : 0.0;
  for (std::size_t i = 0; i < h; ++i) m.scores(i, i) = diag;
  return m;
}

}  // namespace

SimilarityMatrix original_similarity_layer(std::span<const Matrix> heads, std::size_t layer, CacheTarget target,
                                           Criterion criterion) {
  check_heads(heads);
  const std::size_t h = heads.size();
  SimilarityMatrix m = blank(layer, target, criterion, SimilarityStage::kOriginal, h);
  const auto pairs = upper_pairs(h);
  std::vector<PairScore> out(pairs.size());
  const auto np = static_cast<long>(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (long p = 0; p < np; ++p) {
    const auto [i, j] = pairs[static_cast<std::size_t>(p)];
    out[static_cast<std::size_t>(p)] = criterion == Criterion::kCos
                                           ? mean_cosine(heads[i], heads[j])
                                           : PairScore{neg_mean_distance(heads[i], heads[j]), 0};
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    m.scores(i, j) = m.scores(j, i) = out[p].score;
    m.skipped_tokens += out[p].skipped;
  }
  return m;
}

std::vector<SimilarityMatrix> original_similarity(const KVCacheSet& cache, CacheTarget target, Criterion criterion) {
  std::vector<SimilarityMatrix> out;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    const auto& heads = target == CacheTarget::kKey ? cache.keys[l] : cache.values[l];
    out.push_back(original_similarity_layer(heads, l, target, criterion));
  }
  return out;
}

AlignedSimilarity aligned_similarity_layer(std::span<const Matrix> heads, std::size_t layer, CacheTarget target,
                                           Criterion criterion, RotationPairing pairing) {
  check_heads(heads);
  const std::size_t h = heads.size();
  const std::size_t hd = heads[0].rows();
  if (target == CacheTarget::kKey && hd % 2 != 0) throw InvalidArgument("aligned_similarity: odd key head dimension");

  // The cos criterion fits on unit-normalized tokens; dist fits on the raw caches.
  std::vector<Matrix> fit_inputs;
  fit_inputs.reserve(h);
  for (const auto& m : heads) fit_inputs.push_back(criterion == Criterion::kCos ? normalize_columns(m) : m);

  AlignedSimilarity out{blank(layer, target, criterion, SimilarityStage::kAfter, h),
                        PairTransformTable(target, h, hd)};
  const auto pairs = upper_pairs(h);
  struct Fit {
    Matrix q;
    BlockRotation rot;
    PairScore score;
  };
  std::vector<Fit> fits(pairs.size());
  const auto np = static_cast<long>(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (long p = 0; p < np; ++p) {
    const auto [i, j] = pairs[static_cast<std::size_t>(p)];
    Fit& f = fits[static_cast<std::size_t>(p)];
    PairFit fit = solve_pair(fit_inputs[j], fit_inputs[i], target, pairing);
    if (criterion == Criterion::kDist) fit = refine_distance_fit(heads[j], heads[i], std::move(fit), target, pairing);
    const Matrix moved = fit.moved(heads[j]);
    f.q = std::move(fit.q);
    f.rot = std::move(fit.rot);
    f.score = criterion == Criterion::kCos ? mean_cosine(heads[i], moved)
                                           : PairScore{neg_mean_distance(heads[i], moved), 0};
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    const Fit& f = fits[p];
    out.sim.scores(i, j) = out.sim.scores(j, i) = f.score.score;
    out.sim.skipped_tokens += f.score.skipped;
    if (target == CacheTarget::kKey) {
      out.transforms.set_rotation(i, j, f.rot);
      out.transforms.set_rotation(j, i, f.rot.inverse());
    } else {
      out.transforms.set(i, j, f.q);
      out.transforms.set(j, i, f.q.transposed());
    }
  }
  return out;
}

std::vector<AlignedSimilarity> aligned_similarity(const KVCacheSet& cache, CacheTarget target, Criterion criterion,
                                                  RotationPairing pairing) {
  std::vector<AlignedSimilarity> out;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    const auto& heads = target == CacheTarget::kKey ? cache.keys[l] : cache.values[l];
    out.push_back(aligned_similarity_layer(heads, l, target, criterion, pairing));
  }
  return out;
}

namespace {

using RowKey = std::tuple<std::size_t, int, int, int, std::size_t, std::size_t>;

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void export_similarity_report(std::span<const SimilarityMatrix> matrices, const std::filesystem::path& path) {
  std::map<RowKey, double> rows;
  for (const auto& m : matrices) {
    for (std::size_t i = 0; i < m.n_heads(); ++i)
      for (std::size_t j = i + 1; j < m.n_heads(); ++j)
        rows[{m.layer, static_cast<int>(m.target), static_cast<int>(m.criterion), static_cast<int>(m.stage), i, j}] =
            m.scores(i, j);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "layer,target,criterion,stage,i,j,score\n";
  for (const auto& [k, score] : rows) {
    const auto& [layer, target, criterion, stage, i, j] = k;
    out << layer << ',' << to_string(static_cast<CacheTarget>(target)) << ','
        << to_string(static_cast<Criterion>(criterion)) << ',' << to_string(static_cast<SimilarityStage>(stage)) << ','
        << i << ',' << j << ',' << format_score(score) << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<SimilarityMatrix> import_similarity_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "layer,target,criterion,stage,i,j,score") {
    throw FormatError(FormatError::Detail::kCorruptHeader, "'" + path.string() + "' is not a similarity report");
  }
  using GroupKey = std::tuple<std::size_t, int, int, int>;
  std::map<GroupKey, std::vector<std::tuple<std::size_t, std::size_t, double>>> groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    try {
      if (f.size() != 7) throw InvalidArgument("expected 7 fields");
      const GroupKey key{std::stoul(f[0]), static_cast<int>(target_from_string(f[1])),
                         static_cast<int>(criterion_from_string(f[2])), static_cast<int>(stage_from_string(f[3]))};
      groups[key].emplace_back(std::stoul(f[4]), std::stoul(f[5]), std::stod(f[6]));
    } catch (const std::exception& e) {
      throw FormatError(FormatError::Detail::kOther,
                        "bad similarity row " + std::to_string(line_no) + " in '" + path.string() + "': " + e.what());
    }
  }
  std::vector<SimilarityMatrix> out;
  for (const auto& [key, entries] : groups) {
    std::size_t h = 0;
    for (const auto& [i, j, s] : entries) h = std::max({h, i + 1, j + 1});
    const auto& [layer, target, criterion, stage] = key;
    SimilarityMatrix m = blank(layer, static_cast<CacheTarget>(target), static_cast<Criterion>(criterion),
                               static_cast<SimilarityStage>(stage), h);
    for (const auto& [i, j, s] : entries) m.scores(i, j) = m.scores(j, i) = s;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace mha2gqa
