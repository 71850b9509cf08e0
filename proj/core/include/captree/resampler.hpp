#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/backend.hpp"

namespace captree {

struct ActionRef {
    std::string video_id;
    std::int64_t node_id{0};

    friend auto operator<=>(const ActionRef&, const ActionRef&) = default;
};

// Trim, collapse internal whitespace runs to one space, ASCII-lowercase.
std::string canonicalize_action(std::string_view text);

struct DedupGroup {
    std::string canonical_text;
    std::size_t count{0};
    std::vector<ActionRef> members;  // input order
};

class DedupTable {
public:
    void add(std::string_view text, ActionRef ref);

    // Groups in first-seen order.
    std::span<const DedupGroup> groups() const noexcept { return groups_; }
    const DedupGroup* find(std::string_view canonical_text) const;
    std::size_t total_count() const noexcept { return total_; }
    std::size_t duplicate_groups() const;     // groups with count > 1
    std::size_t duplicate_instances() const;  // members of such groups

private:
    std::vector<DedupGroup> groups_;
    // FNV-1a of the canonical text -> candidate groups; equality is verified
    // on lookup so colliding hashes never merge distinct texts.
    std::unordered_multimap<std::uint64_t, std::size_t> index_;
    std::size_t total_{0};
};

DedupTable dedup(std::span<const std::pair<std::string, ActionRef>> actions);

// Row-major point set.
struct PointSet {
    std::size_t dim{0};
    std::vector<double> values;

    std::size_t size() const noexcept { return dim == 0 ? 0 : values.size() / dim; }
    std::span<const double> row(std::size_t i) const { return std::span(values).subspan(i * dim, dim); }
    void push_back(std::span<const double> p);
    void push_back(std::span<const float> p);
};

struct KMeansOptions {
    std::size_t max_iterations{100};
    double tolerance{1e-6};  // stop when the largest centroid shift is below this
    std::size_t threads{1};
};

struct ClusterModel {
    std::size_t k{0};
    std::uint64_t seed{0};
    PointSet centroids;
    std::vector<std::size_t> assignment;  // point index -> cluster
    double inertia{0.0};
    std::size_t iterations{0};
    std::vector<double> inertia_history;  // after each Lloyd iteration

    std::vector<std::size_t> cluster_sizes() const;
};

// Bounded uniform integer in [0, n) from a 64-bit engine by rejection, so
// draws are identical across standard library implementations.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n);
// Uniform double in [0, 1) from the top 53 bits of one engine output.
double uniform_unit(std::mt19937_64& rng);

double squared_distance(std::span<const double> a, std::span<const double> b);

// Index of the nearest centroid; ties go to the lowest index.
std::size_t nearest_centroid(std::span<const double> p, const PointSet& centroids);

// k-means++ seeding followed by Lloyd iterations. Empty clusters are
// re-seeded with the point farthest from its centroid. Throws TooFewPoints
// when k exceeds the number of points and DimensionMismatch on bad input.
ClusterModel kmeans(const PointSet& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {});

struct Draw {
    std::size_t cluster{0};
    std::size_t item{0};  // index into the clustered item list

    friend bool operator==(const Draw&, const Draw&) = default;
};

struct ResamplePlan {
    std::size_t target_size{0};
    std::uint64_t seed{0};
    std::vector<Draw> draws;
};

// Each draw picks a non-empty cluster uniformly, then a member uniformly
// (members ordered by item index), with replacement.
ResamplePlan resample(const ClusterModel& model, std::size_t target_size, std::uint64_t seed);

// End-to-end resampling over brief action texts.
struct SemanticResampleResult {
    DedupTable table;
    std::vector<std::string> texts;  // canonical texts, the clustered items
    ClusterModel model;
    ResamplePlan plan;
};

SemanticResampleResult semantic_resample(std::span<const std::pair<std::string, ActionRef>> actions, Backend& backend,
                                         std::size_t k, std::size_t target_size, std::uint64_t seed,
                                         const KMeansOptions& opts = {});

nlohmann::json cluster_report(const ClusterModel& model);

}  // namespace captree
