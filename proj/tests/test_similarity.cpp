#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "mha2gqa/error.hpp"
#include "mha2gqa/similarity.hpp"
#include "test_support.hpp"

namespace mha2gqa {
namespace {

using testing::naive_matmul;
using testing::random_matrix;
using testing::random_orthogonal;

// Per-token loop, written independently of the library.
double oracle_mean_cos(const Matrix& a, const Matrix& b) {
  double sum = 0.0;
  int valid = 0;
  for (std::size_t n = 0; n < a.cols(); ++n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      dot += a(r, n) * b(r, n);
      na += a(r, n) * a(r, n);
      nb += b(r, n) * b(r, n);
    }
    if (na == 0.0 || nb == 0.0) continue;
    sum += dot / std::sqrt(na * nb);
    ++valid;
  }
  return sum / valid;
}

double oracle_mean_dist(const Matrix& a, const Matrix& b) {
  double sum = 0.0;
  for (std::size_t n = 0; n < a.cols(); ++n) {
    double d2 = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) d2 += (a(r, n) - b(r, n)) * (a(r, n) - b(r, n));
    sum += std::sqrt(d2);
  }
  return sum / a.cols();
}

std::vector<Matrix> random_heads(std::size_t h, std::size_t d, std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::vector<Matrix> heads;
  for (std::size_t i = 0; i < h; ++i) heads.push_back(random_matrix(d, n, rng));
  return heads;
}

TEST(Similarity, OriginalMatchesOracle) {
  const auto heads = random_heads(5, 8, 40, 1);
  const auto cos = original_similarity_layer(heads, 0, CacheTarget::kValue, Criterion::kCos);
  const auto dist = original_similarity_layer(heads, 0, CacheTarget::kValue, Criterion::kDist);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(cos.scores(i, i), 1.0);
    EXPECT_DOUBLE_EQ(dist.scores(i, i), 0.0);
    for (std::size_t j = 0; j < 5; ++j) {
      if (i == j) continue;
      EXPECT_NEAR(cos.scores(i, j), oracle_mean_cos(heads[i], heads[j]), 1e-12);
      EXPECT_NEAR(dist.scores(i, j), -oracle_mean_dist(heads[i], heads[j]), 1e-12);
      EXPECT_EQ(cos.scores(i, j), cos.scores(j, i));
    }
  }
}

TEST(Similarity, CopiesAndNegations) {
  auto heads = random_heads(1, 6, 12, 9);
  heads.push_back(heads[0]);
  heads.push_back(heads[0] * -1.0);
  const auto m = original_similarity_layer(heads, 0, CacheTarget::kValue);
  EXPECT_NEAR(m.scores(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(m.scores(0, 2), -1.0, 1e-15);
  const auto d = aligned_similarity_layer(heads, 0, CacheTarget::kValue, Criterion::kDist);
  EXPECT_NEAR(d.sim.scores(0, 1), 0.0, 1e-12);
}

TEST(Similarity, TwoTokenHandComputed) {
  // Token 0: (1,0) vs (1,1) -> cos 1/sqrt2. Token 1: (0,2) vs (3,0) -> cos 0.
  const Matrix a = Matrix::from_rows({{1, 0}, {0, 2}});
  const Matrix b = Matrix::from_rows({{1, 3}, {1, 0}});
  const std::vector<Matrix> heads{a, b};
  const auto m = original_similarity_layer(heads, 0, CacheTarget::kValue);
  EXPECT_NEAR(m.scores(0, 1), 0.5 / std::sqrt(2.0), 1e-15);
}

TEST(Similarity, KeyScoresInvariantToRope) {
  std::mt19937_64 rng(10);
  const RopeTable rope(8, 10000.0, RotationPairing::kHalfSplit);
  std::vector<Matrix> pre, post;
  for (int h = 0; h < 4; ++h) {
    pre.push_back(random_matrix(8, 16, rng));
    Matrix p = pre.back();
    rope.apply(p, 0, false);
    post.push_back(p);
  }
  for (auto crit : {Criterion::kCos, Criterion::kDist}) {
    const auto a = aligned_similarity_layer(pre, 0, CacheTarget::kKey, crit);
    const auto b = aligned_similarity_layer(post, 0, CacheTarget::kKey, crit);
    EXPECT_LT(max_abs_diff(a.sim.scores, b.sim.scores), 1e-10);
  }
}

TEST(Similarity, DistAlignmentNeverIncreasesDistance) {
  for (unsigned seed = 20; seed < 30; ++seed) {
    const auto heads = random_heads(5, 8, 24, seed);
    for (auto target : {CacheTarget::kKey, CacheTarget::kValue}) {
      const auto orig = original_similarity_layer(heads, 0, target, Criterion::kDist);
      const auto al = aligned_similarity_layer(heads, 0, target, Criterion::kDist);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          EXPECT_GE(al.sim.scores(i, j), orig.scores(i, j) - 1e-12);
          EXPECT_LE(al.sim.scores(i, j), 0.0);
          EXPECT_NEAR(al.sim.scores(i, j), al.sim.scores(j, i), 1e-10);
        }
    }
  }
}

TEST(Similarity, ZeroNormTokensAreSkippedAndCounted) {
  auto heads = random_heads(3, 4, 10, 2);
  for (std::size_t r = 0; r < 4; ++r) heads[1](r, 3) = 0.0;
  const auto m = original_similarity_layer(heads, 0, CacheTarget::kValue);
  // Token 3 is skipped for pairs (0,1) and (1,2).
  EXPECT_EQ(m.skipped_tokens, 2u);
  EXPECT_NEAR(m.scores(0, 1), oracle_mean_cos(heads[0], heads[1]), 1e-12);
  EXPECT_TRUE(std::isfinite(m.scores(0, 1)));
}

TEST(Similarity, AllZeroCacheRejected) {
  std::vector<Matrix> heads(3, Matrix(4, 6));
  EXPECT_THROW(original_similarity_layer(heads, 0, CacheTarget::kValue), InvalidArgument);
  EXPECT_THROW(aligned_similarity_layer(heads, 0, CacheTarget::kValue, Criterion::kCos), InvalidArgument);
}

TEST(Similarity, AlignedRecoversExactlyTransformedHeads) {
  std::mt19937_64 rng(3);
  const Matrix base = random_matrix(8, 30, rng);
  const Matrix q = random_orthogonal(8, rng);
  const std::vector<Matrix> heads{base, naive_matmul(q, base)};
  for (auto crit : {Criterion::kCos, Criterion::kDist}) {
    const auto a = aligned_similarity_layer(heads, 0, CacheTarget::kValue, crit);
    EXPECT_NEAR(a.sim.scores(0, 1), crit == Criterion::kCos ? 1.0 : 0.0, 1e-9);
    // Head 1 maps onto head 0 via q^T; the reverse entry is its transpose.
    EXPECT_LT(max_abs_diff(a.transforms.at(0, 1), q.transposed()), 1e-9);
    EXPECT_LT(max_abs_diff(a.transforms.at(1, 0), q), 1e-9);
  }
}

TEST(Similarity, AlignedKeysUseBlockRotations) {
  std::mt19937_64 rng(4);
  const Matrix base = random_matrix(8, 30, rng);
  Matrix rotated = base;
  const BlockRotation r({0.3, -1.1, 2.0, 0.5}, RotationPairing::kHalfSplit);
  r.apply(rotated);
  const std::vector<Matrix> heads{base, rotated};
  const auto a = aligned_similarity_layer(heads, 0, CacheTarget::kKey, Criterion::kCos);
  EXPECT_NEAR(a.sim.scores(0, 1), 1.0, 1e-9);
  const auto back = a.transforms.rotation_at(0, 1).compose(r);
  for (double t : back.angles()) EXPECT_NEAR(std::remainder(t, 2 * M_PI), 0.0, 1e-9);
  EXPECT_LT(max_abs_diff(a.transforms.at(1, 0), r.to_matrix()), 1e-9);
}

TEST(Similarity, AlignmentNeverLowersCosine) {
  const auto heads = random_heads(6, 8, 50, 5);
  for (auto target : {CacheTarget::kKey, CacheTarget::kValue}) {
    const auto orig = original_similarity_layer(heads, 0, target, Criterion::kCos);
    const auto al = aligned_similarity_layer(heads, 0, target, Criterion::kCos);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(al.sim.scores(i, j), orig.scores(i, j) - 1e-12);
        EXPECT_LE(al.sim.scores(i, j), 1.0 + 1e-12);
      }
  }
}

TEST(Similarity, ValueAlignmentAtLeastMatchesKeyAlignment) {
  // Values get the full orthogonal group, so they can align at least as well as keys.
  const auto heads = random_heads(4, 8, 50, 6);
  const auto k = aligned_similarity_layer(heads, 0, CacheTarget::kKey, Criterion::kCos);
  const auto v = aligned_similarity_layer(heads, 0, CacheTarget::kValue, Criterion::kCos);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_GE(v.sim.scores(i, j), k.sim.scores(i, j) - 1e-9);
}

class ReportTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("mha2gqa_sim_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(ReportTest, RoundTripIsExact) {
  const auto heads = random_heads(4, 8, 20, 7);
  std::vector<SimilarityMatrix> ms{
      aligned_similarity_layer(heads, 1, CacheTarget::kValue, Criterion::kCos).sim,
      original_similarity_layer(heads, 0, CacheTarget::kKey, Criterion::kDist),
      original_similarity_layer(heads, 1, CacheTarget::kValue, Criterion::kCos),
  };
  export_similarity_report(ms, dir_ / "r.csv");
  const auto back = import_similarity_report(dir_ / "r.csv");
  ASSERT_EQ(back.size(), 3u);
  // Imported order is ascending by (layer, target, criterion, stage).
  EXPECT_EQ(back[0].layer, 0u);
  EXPECT_EQ(back[1].stage, SimilarityStage::kOriginal);
  EXPECT_EQ(back[2].stage, SimilarityStage::kAfter);
  EXPECT_TRUE(back[0].scores == ms[1].scores);
  EXPECT_TRUE(back[1].scores == ms[2].scores);
  EXPECT_TRUE(back[2].scores == ms[0].scores);

  std::ifstream in(dir_ / "r.csv");
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3 * 6);
}

TEST_F(ReportTest, EmptyReportHasOnlyHeader) {
  export_similarity_report({}, dir_ / "e.csv");
  std::ifstream in(dir_ / "e.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "layer,target,criterion,stage,i,j,score\n");
  EXPECT_TRUE(import_similarity_report(dir_ / "e.csv").empty());
}

TEST_F(ReportTest, MalformedReportIsFormatError) {
  {
    std::ofstream out(dir_ / "b.csv");
    out << "layer,target,criterion,stage,i,j,score\n0,key,cos,original,0,1\n";
  }
  EXPECT_THROW(import_similarity_report(dir_ / "b.csv"), FormatError);
  EXPECT_THROW(import_similarity_report(dir_ / "missing.csv"), IoError);
}

TEST(Similarity, FromCollectedCache) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 8);
  const auto cache = collect_kv(w, cfg, std::vector<TokenSeq>{{1, 5, 9, 13, 2, 7}});
  const auto sims = aligned_similarity(cache, CacheTarget::kKey, Criterion::kCos);
  ASSERT_EQ(sims.size(), cfg.n_layers);
  EXPECT_EQ(sims[1].sim.layer, 1u);
  EXPECT_EQ(sims[0].sim.n_heads(), cfg.n_heads);
}

}  // namespace
}  // namespace mha2gqa
