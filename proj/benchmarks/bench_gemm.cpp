#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "circuitbox/gemm.hpp"

namespace {

void fill(std::vector<double>& v, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    for (double& x : v) x = d(rng);
}

void BM_gemm(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    std::vector<double> a(n * n), b(n * n), c(n * n);
    fill(a, 1);
    fill(b, 2);
    for (auto _ : state) {
        circuitbox::gemm(a.data(), b.data(), c.data(), n, n, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * n * n * n);
}
BENCHMARK(BM_gemm)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

void BM_gemm_bt(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    std::vector<double> a(n * n), b(n * n), c(n * n);
    fill(a, 1);
    fill(b, 2);
    for (auto _ : state) {
        circuitbox::gemm_bt(a.data(), b.data(), c.data(), n, n, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * n * n * n);
}
BENCHMARK(BM_gemm_bt)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
