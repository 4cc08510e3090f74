// Serial reference vs OpenMP kernels. Each pair shares its argument list so
// the two rows line up in the report.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "sdreid/kernels.hpp"

namespace k = sdreid::kernels;

namespace {

std::vector<double> random_vec(size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(gen);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& st) {
  const int64_t n = st.range(0);
  const k::GemmShape s{n, n, n};
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Parallel) k::gemm(s, a, b, c);
    else k::serial::gemm(s, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

template <bool Parallel>
void BM_pairwise(benchmark::State& st) {
  const int64_t m = st.range(0), n = 4 * m, d = 64;
  const auto x = random_vec(m * d, 3), y = random_vec(n * d, 4);
  std::vector<double> out(m * n);
  for (auto _ : st) {
    if constexpr (Parallel) k::pairwise_distances(x, m, y, n, d, out);
    else k::serial::pairwise_distances(x, m, y, n, d, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_attention(benchmark::State& st) {
  const k::AttentionShape s{st.range(0), 17, 17, 4, 16, 0.25};
  const int64_t w = s.heads * s.head_dim;
  const auto q = random_vec(s.batch * s.sq * w, 5), kk = random_vec(s.batch * s.sk * w, 6),
             v = random_vec(s.batch * s.sk * w, 7);
  std::vector<double> out(s.batch * s.sq * w), probs(s.batch * s.heads * s.sq * s.sk);
  for (auto _ : st) {
    if constexpr (Parallel) k::attention_forward(s, q, kk, v, out, probs);
    else k::serial::attention_forward(s, q, kk, v, out, probs);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_im2col(benchmark::State& st) {
  k::ConvGeometry g;
  g.batch = st.range(0);
  g.channels = 64;
  g.height = g.width = 8;
  const auto x = random_vec(g.batch * g.channels * g.height * g.width, 8);
  std::vector<double> col(g.channels * 9 * g.batch * g.out_height() * g.out_width());
  for (auto _ : st) {
    if constexpr (Parallel) k::im2col(g, x, col);
    else k::serial::im2col(g, x, col);
    benchmark::DoNotOptimize(col.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_pairwise<false>)->Name("pairwise/serial")->Arg(100)->Arg(400);
BENCHMARK(BM_pairwise<true>)->Name("pairwise/omp")->Arg(100)->Arg(400);
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Arg(8)->Arg(64);
BENCHMARK(BM_attention<true>)->Name("attention/omp")->Arg(8)->Arg(64);
BENCHMARK(BM_im2col<false>)->Name("im2col/serial")->Arg(8)->Arg(32);
BENCHMARK(BM_im2col<true>)->Name("im2col/omp")->Arg(8)->Arg(32);

BENCHMARK_MAIN();
