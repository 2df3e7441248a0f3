#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mha2gqa/linalg.hpp"
#include "mha2gqa/model.hpp"

namespace mha2gqa {

enum class CacheTarget { kKey, kValue };
enum class Criterion { kCos, kDist };
enum class SimilarityStage { kOriginal, kAfter };

const char* to_string(CacheTarget t);
const char* to_string(Criterion c);
const char* to_string(SimilarityStage s);
CacheTarget target_from_string(const std::string& s);
Criterion criterion_from_string(const std::string& s);
SimilarityStage stage_from_string(const std::string& s);

// Symmetric H x H pairwise head scores for one layer. Cos scores lie in [-1, 1]
// (diagonal 1); dist scores are negative mean Euclidean distances (diagonal 0).
struct SimilarityMatrix {
  std::size_t layer = 0;
  CacheTarget target = CacheTarget::kValue;
  Criterion criterion = Criterion::kCos;
  SimilarityStage stage = SimilarityStage::kOriginal;
  Matrix scores;
  // Tokens excluded from cosine averages because a vector had zero norm, summed over pairs.
  std::size_t skipped_tokens = 0;

  std::size_t n_heads() const { return scores.rows(); }
};

// Aligning transform for each ordered pair (i, j): maps head j's cache onto head i's.
// Keys use per-plane rotations (stored in `rotations`), values the full orthogonal group.
class PairTransformTable {
 public:
  PairTransformTable() = default;
  PairTransformTable(CacheTarget target, std::size_t n_heads, std::size_t head_dim);

  CacheTarget target() const noexcept { return target_; }
  std::size_t n_heads() const noexcept { return n_heads_; }
  const Matrix& at(std::size_t i, std::size_t j) const { return transforms_[i * n_heads_ + j]; }
  const BlockRotation& rotation_at(std::size_t i, std::size_t j) const { return rotations_[i * n_heads_ + j]; }

  void set(std::size_t i, std::size_t j, Matrix q);
  void set_rotation(std::size_t i, std::size_t j, const BlockRotation& r);

 private:
  CacheTarget target_ = CacheTarget::kValue;
  std::size_t n_heads_ = 0;
  std::vector<Matrix> transforms_;
  std::vector<BlockRotation> rotations_;
};

struct AlignedSimilarity {
  SimilarityMatrix sim;
  PairTransformTable transforms;
};

// Unaligned scores: mean cosine (cos) or negative mean Euclidean distance (dist).
SimilarityMatrix original_similarity_layer(std::span<const Matrix> heads, std::size_t layer, CacheTarget target,
                                           Criterion criterion = Criterion::kCos);
std::vector<SimilarityMatrix> original_similarity(const KVCacheSet& cache, CacheTarget target,
                                                  Criterion criterion = Criterion::kCos);

AlignedSimilarity aligned_similarity_layer(std::span<const Matrix> heads, std::size_t layer, CacheTarget target,
                                           Criterion criterion,
                                           RotationPairing pairing = RotationPairing::kHalfSplit);
std::vector<AlignedSimilarity> aligned_similarity(const KVCacheSet& cache, CacheTarget target, Criterion criterion,
                                                  RotationPairing pairing = RotationPairing::kHalfSplit);

// Per-token unit normalization; zero-norm columns stay zero.
Matrix normalize_columns(const Matrix& x);

// CSV rows (layer,target,criterion,stage,i,j,score) for every i < j, sorted ascending.
void export_similarity_report(std::span<const SimilarityMatrix> matrices, const std::filesystem::path& path);
std::vector<SimilarityMatrix> import_similarity_report(const std::filesystem::path& path);

}  // namespace mha2gqa
