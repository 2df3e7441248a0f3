#include <benchmark/benchmark.h>

#include <random>

#include "mha2gqa/kernels.hpp"
#include "mha2gqa/model.hpp"
#include "mha2gqa/similarity.hpp"
#include "mha2gqa/synthetic.hpp"

using namespace mha2gqa;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Matrix m(r, c);
  for (auto& v : m.data()) v = d(rng);
  return m;
}

template <void (*Gemm)(const Matrix&, const Matrix&, Matrix&, bool)>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  Matrix c(n, n);
  for (auto _ : state) {
    Gemm(a, b, c, false);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

BENCHMARK(BM_Gemm<kernels::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_Gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_Gemm<kernels::gemm_tn>)->Name("gemm_tn/parallel")->Arg(256);
BENCHMARK(BM_Gemm<kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(256);
BENCHMARK(BM_Gemm<kernels::gemm_nt>)->Name("gemm_nt/parallel")->Arg(256);
BENCHMARK(BM_Gemm<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(256);

void BM_Forward(benchmark::State& state) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 3);
  const auto seq = make_pattern_data(PatternTask{}, 1, 4).front();
  for (auto _ : state) benchmark::DoNotOptimize(state.range(0) ? forward(w, cfg, seq) : forward_reference(w, cfg, seq));
}
BENCHMARK(BM_Forward)->ArgName("batched")->Arg(1)->Arg(0);

// Aligned pairwise similarity of one layer, capped to 1 thread vs the runtime default.
void BM_AlignedSimilarity(benchmark::State& state) {
  const auto cfg = toy_config();
  const auto cache = collect_kv(init_random_weights(cfg, 5), cfg, make_pattern_data(PatternTask{}, 16, 6));
  const int restore = kernels::max_threads();
  if (state.range(0) == 1) kernels::set_num_threads(1);
  for (auto _ : state)
    benchmark::DoNotOptimize(aligned_similarity_layer(cache.values[0], 0, CacheTarget::kValue, Criterion::kCos));
  kernels::set_num_threads(restore);
}
BENCHMARK(BM_AlignedSimilarity)->ArgName("threads_capped")->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
