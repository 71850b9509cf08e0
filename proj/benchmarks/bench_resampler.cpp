#include <benchmark/benchmark.h>

#include <random>

#include "captree/resampler.hpp"

namespace {

captree::PointSet random_points(std::size_t n, std::size_t dim) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> noise(0.0, 1.0);
    captree::PointSet ps;
    std::vector<double> p(dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& x : p) x = noise(rng) + static_cast<double>(i % 20);
        ps.push_back(std::span<const double>(p));
    }
    return ps;
}

void BM_KMeans(benchmark::State& state) {
    const auto ps = random_points(static_cast<std::size_t>(state.range(0)), 32);
    captree::KMeansOptions opts;
    opts.threads = static_cast<std::size_t>(state.range(2));
    for (auto _ : state) {
        benchmark::DoNotOptimize(captree::kmeans(ps, static_cast<std::size_t>(state.range(1)), 17, opts));
    }
}

void BM_Resample(benchmark::State& state) {
    captree::ClusterModel model;
    model.k = 1000;
    for (std::size_t i = 0; i < 100000; ++i) model.assignment.push_back(i % 997);
    for (auto _ : state) benchmark::DoNotOptimize(captree::resample(model, state.range(0), 17));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Dedup(benchmark::State& state) {
    std::vector<std::pair<std::string, captree::ActionRef>> actions;
    for (int i = 0; i < state.range(0); ++i) actions.push_back({"Stir the pot " + std::to_string(i % 5000), {"v", i}});
    for (auto _ : state) benchmark::DoNotOptimize(captree::dedup(actions));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_KMeans)->Args({5000, 50, 1})->Args({20000, 100, 1})->Args({20000, 100, 4})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Resample)->Arg(1000000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Dedup)->Arg(100000)->Unit(benchmark::kMillisecond);
