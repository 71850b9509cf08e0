#include <benchmark/benchmark.h>

#include <random>

#include "captree/segmenter.hpp"

namespace {

captree::FrameEmbeddingSequence random_sequence(std::size_t n, std::size_t dim) {
    std::mt19937_64 rng(42);
    std::normal_distribution<double> noise(0.0, 1.0);
    captree::FrameEmbeddingSequence seq("bench", dim, 4.0 / 30.0);
    std::vector<double> row(dim);
    for (std::size_t i = 0; i < n; ++i) {
        // Piecewise-constant scenes plus noise, roughly what a video encoder emits.
        const double scene = static_cast<double>(i / 150);
        for (double& x : row) x = scene + 0.2 * noise(rng);
        seq.push_back(static_cast<double>(i) * 4.0 / 30.0, row);
    }
    return seq;
}

void BM_BuildTree(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto dim = static_cast<std::size_t>(state.range(1));
    const auto seq = random_sequence(n, dim);
    for (auto _ : state) benchmark::DoNotOptimize(captree::build_tree(seq));
    state.SetComplexityN(state.range(0));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_WardCost(benchmark::State& state) {
    const auto dim = static_cast<std::size_t>(state.range(0));
    std::vector<double> a(dim, 0.5);
    std::vector<double> b(dim, -0.5);
    const auto sa = captree::ClusterStat::singleton(a);
    const auto sb = captree::ClusterStat::singleton(b);
    for (auto _ : state) benchmark::DoNotOptimize(captree::ward_cost(sa, sb));
}

}  // namespace

// A one-hour video sampled at 7.5 fps is 27000 frames.
BENCHMARK(BM_BuildTree)
    ->Args({1000, 64})
    ->Args({8000, 64})
    ->Args({27000, 64})
    ->Args({27000, 768})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_WardCost)->Arg(64)->Arg(768);
