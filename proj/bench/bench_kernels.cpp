// Serial reference kernels against their OpenMP counterparts.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>
#include <omp.h>

#include "pfdetr/kernels.hpp"

namespace k = pfdetr::kernels;

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const k::GemmShape s{n, n, n};
    const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Gemm(k::Trans::No, k::Trans::No, s, a, b, c, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
    state.counters["threads"] = omp_get_max_threads();
}

// attention-score shape: (192 × 16) · (16 × 192)ᵀ
template <auto Gemm>
void BM_GemmScores(benchmark::State& state) {
    const std::size_t t = 192, d = 16;
    const auto q = random_values(t * d, 3), kk = random_values(t * d, 4);
    std::vector<double> c(t * t);
    for (auto _ : state) {
        Gemm(k::Trans::No, k::Trans::Yes, {t, t, d}, q, kk, c, false);
        benchmark::DoNotOptimize(c.data());
    }
}

template <auto Softmax>
void BM_Softmax(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0)), cols = rows;
    const auto x = random_values(rows * cols, 5);
    std::vector<double> out(rows * cols);
    for (auto _ : state) {
        Softmax(rows, cols, x, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

template <auto LayerNorm>
void BM_LayerNorm(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0)), cols = std::size_t{128};
    const auto x = random_values(rows * cols, 6);
    const std::vector<double> gamma(cols, 1.0), beta(cols, 0.0);
    std::vector<double> out(rows * cols), mean(rows), rstd(rows);
    for (auto _ : state) {
        LayerNorm(rows, cols, x, gamma, beta, out, mean, rstd);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

template <auto Gelu>
void BM_Gelu(benchmark::State& state) {
    const auto x = random_values(static_cast<std::size_t>(state.range(0)), 7);
    std::vector<double> out(x.size());
    for (auto _ : state) {
        Gelu(x, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_Gemm<k::serial::gemm>)->Name("gemm/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_Gemm<k::parallel::gemm>)->Name("gemm/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_GemmScores<k::serial::gemm>)->Name("gemm_scores/serial");
BENCHMARK(BM_GemmScores<k::parallel::gemm>)->Name("gemm_scores/parallel");
BENCHMARK(BM_Softmax<k::serial::softmax_rows>)->Name("softmax/serial")->Arg(64)->Arg(192)->Arg(512);
BENCHMARK(BM_Softmax<k::parallel::softmax_rows>)->Name("softmax/parallel")->Arg(64)->Arg(192)->Arg(512);
BENCHMARK(BM_LayerNorm<k::serial::layer_norm_rows>)->Name("layer_norm/serial")->Arg(192)->Arg(1024);
BENCHMARK(BM_LayerNorm<k::parallel::layer_norm_rows>)->Name("layer_norm/parallel")->Arg(192)->Arg(1024);
BENCHMARK(BM_Gelu<k::serial::gelu>)->Name("gelu/serial")->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Gelu<k::parallel::gelu>)->Name("gelu/parallel")->Arg(1 << 12)->Arg(1 << 16);

BENCHMARK_MAIN();
