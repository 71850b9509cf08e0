#include <benchmark/benchmark.h>

#include "captree/stats.hpp"

namespace {

void BM_StatsAdd(benchmark::State& state) {
    captree::AnnotationRecord rec;
    rec.video_id = "v";
    rec.end_s = 12.0;
    rec.summary_brief = "A person assembles a wooden birdhouse on a workbench.";
    rec.summary_detailed =
        "In a cluttered garage a person lines up two cedar panels, checks the angle with a square, "
        "and drives three nails along the seam before reaching for the roof piece.";
    rec.action_brief = "Nail the side panels together";
    rec.action_detailed = "Hold the panels at a right angle and hammer nails along the joint.";
    captree::StatsAccumulator acc;
    for (auto _ : state) acc.add(rec);
    state.SetItemsProcessed(state.iterations());
}

}  // namespace

BENCHMARK(BM_StatsAdd);
