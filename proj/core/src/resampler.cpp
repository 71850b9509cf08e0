#include "captree/resampler.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "captree/error.hpp"
#include "captree/hashing.hpp"
#include "captree/parallel.hpp"

namespace captree {

std::string canonicalize_action(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

void DedupTable::add(std::string_view text, ActionRef ref) {
    std::string canon = canonicalize_action(text);
    const std::uint64_t h = fnv1a64(canon);
    ++total_;
    auto [lo, hi] = index_.equal_range(h);
    for (auto it = lo; it != hi; ++it) {
        DedupGroup& g = groups_[it->second];
        if (g.canonical_text == canon) {
            ++g.count;
            g.members.push_back(std::move(ref));
            return;
        }
    }
    index_.emplace(h, groups_.size());
    groups_.push_back({std::move(canon), 1, {std::move(ref)}});
}

const DedupGroup* DedupTable::find(std::string_view canonical_text) const {
    auto [lo, hi] = index_.equal_range(fnv1a64(canonical_text));
    for (auto it = lo; it != hi; ++it) {
        if (groups_[it->second].canonical_text == canonical_text) return &groups_[it->second];
    }
    return nullptr;
}

std::size_t DedupTable::duplicate_groups() const {
    return static_cast<std::size_t>(
        std::count_if(groups_.begin(), groups_.end(), [](const DedupGroup& g) { return g.count > 1; }));
}

std::size_t DedupTable::duplicate_instances() const {
    std::size_t n = 0;
    for (const auto& g : groups_) {
        if (g.count > 1) n += g.count;
    }
    return n;
}

DedupTable dedup(std::span<const std::pair<std::string, ActionRef>> actions) {
    DedupTable table;
    for (const auto& [text, ref] : actions) table.add(text, ref);
    return table;
}

void PointSet::push_back(std::span<const double> p) {
    if (dim == 0) dim = p.size();
    if (p.size() != dim || dim == 0) throw DimensionMismatch("point dimension mismatch");
    values.insert(values.end(), p.begin(), p.end());
}

void PointSet::push_back(std::span<const float> p) {
    std::vector<double> tmp(p.begin(), p.end());
    push_back(std::span<const double>(tmp));
}

std::vector<std::size_t> ClusterModel::cluster_sizes() const {
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t c : assignment) ++sizes[c];
    return sizes;
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below requires n > 0");
    // Reject the top partial block of 2^64 so every residue is equally likely.
    // rem = 2^64 mod n; when it is zero every draw is accepted.
    const std::uint64_t rem = (std::uint64_t{0} - n) % n;
    const std::uint64_t limit = std::uint64_t{0} - rem;
    for (;;) {
        const std::uint64_t x = rng();
        if (rem == 0 || x < limit) return x % n;
    }
}

double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
    }
    return s;
}

std::size_t nearest_centroid(std::span<const double> p, const PointSet& centroids) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = squared_distance(p, centroids.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

namespace {

std::span<double> mutable_row(PointSet& ps, std::size_t i) {
    return std::span<double>(ps.values).subspan(i * ps.dim, ps.dim);
}

PointSet seed_plus_plus(const PointSet& points, std::size_t k, std::mt19937_64& rng) {
    const std::size_t n = points.size();
    PointSet centroids;
    centroids.dim = points.dim;
    std::vector<bool> chosen(n, false);

    std::size_t first = uniform_below(rng, n);
    centroids.push_back(points.row(first));
    chosen[first] = true;

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), centroids.row(0));

    while (centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += d2[i];

        std::size_t pick = n;
        if (total > 0.0) {
            const double u = uniform_unit(rng) * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0.0) continue;
                acc += d2[i];
                pick = i;
                if (acc > u) break;
            }
        }
        if (pick == n) {
            // All remaining points coincide with a centroid.
            pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
        }
        chosen[pick] = true;
        centroids.push_back(points.row(pick));
        const auto c = centroids.row(centroids.size() - 1);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), c));
    }
    return centroids;
}

// Assigns every point to its nearest centroid; returns whether any changed.
bool assign_points(const PointSet& points, const PointSet& centroids, std::vector<std::size_t>& assignment,
                   std::size_t threads) {
    const std::size_t n = points.size();
    constexpr std::size_t kChunk = 4096;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<char> changed(chunks, 0);
    parallel_for(chunks, threads, [&](std::size_t c) {
        const std::size_t end = std::min(n, (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i) {
            const std::size_t best = nearest_centroid(points.row(i), centroids);
            if (best != assignment[i]) {
                assignment[i] = best;
                changed[c] = 1;
            }
        }
    });
    return std::any_of(changed.begin(), changed.end(), [](char c) { return c != 0; });
}

double total_inertia(const PointSet& points, const PointSet& centroids, const std::vector<std::size_t>& assignment) {
    double s = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) s += squared_distance(points.row(i), centroids.row(assignment[i]));
    return s;
}

void recompute_mean(const PointSet& points, const std::vector<std::size_t>& assignment, std::size_t cluster,
                    PointSet& centroids) {
    auto c = mutable_row(centroids, cluster);
    std::fill(c.begin(), c.end(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (assignment[i] != cluster) continue;
        const auto p = points.row(i);
        for (std::size_t d = 0; d < c.size(); ++d) c[d] += p[d];
        ++count;
    }
    for (double& x : c) x /= static_cast<double>(count);
}

}  // namespace

ClusterModel kmeans(const PointSet& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts) {
    const std::size_t n = points.size();
    if (k == 0) throw std::invalid_argument("k must be positive");
    if (points.dim == 0 || points.values.size() != n * points.dim) throw DimensionMismatch("malformed point set");
    if (k > n) {
        throw TooFewPoints("k=" + std::to_string(k) + " exceeds the number of points (" + std::to_string(n) + ")");
    }

    std::mt19937_64 rng(seed);
    ClusterModel model;
    model.k = k;
    model.seed = seed;
    model.centroids = seed_plus_plus(points, k, rng);
    model.assignment.assign(n, 0);
    assign_points(points, model.centroids, model.assignment, opts.threads);

    const std::size_t dim = points.dim;
    std::vector<double> sums(k * dim);
    std::vector<std::size_t> sizes(k);
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
        PointSet previous = model.centroids;

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(sizes.begin(), sizes.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = model.assignment[i];
            const auto p = points.row(i);
            for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += p[d];
            ++sizes[c];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] == 0) continue;
            auto row = mutable_row(model.centroids, c);
            for (std::size_t d = 0; d < dim; ++d) row[d] = sums[c * dim + d] / static_cast<double>(sizes[c]);
        }

        for (std::size_t empty = 0; empty < k; ++empty) {
            if (sizes[empty] != 0) continue;
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[model.assignment[i]] < 2) continue;
                const double d = squared_distance(points.row(i), model.centroids.row(model.assignment[i]));
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far == n) continue;
            const std::size_t donor = model.assignment[far];
            model.assignment[far] = empty;
            --sizes[donor];
            sizes[empty] = 1;
            const auto p = points.row(far);
            std::copy(p.begin(), p.end(), mutable_row(model.centroids, empty).begin());
            recompute_mean(points, model.assignment, donor, model.centroids);
        }

        model.inertia_history.push_back(total_inertia(points, model.centroids, model.assignment));
        model.iterations = it + 1;

        double shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            shift = std::max(shift, std::sqrt(squared_distance(previous.row(c), model.centroids.row(c))));
        }
        const bool changed = assign_points(points, model.centroids, model.assignment, opts.threads);
        if (!changed && shift < opts.tolerance) break;
    }

    model.inertia = total_inertia(points, model.centroids, model.assignment);
    return model;
}

ResamplePlan resample(const ClusterModel& model, std::size_t target_size, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> members(model.k);
    for (std::size_t i = 0; i < model.assignment.size(); ++i) members.at(model.assignment[i]).push_back(i);
    std::vector<std::size_t> nonempty;
    for (std::size_t c = 0; c < model.k; ++c) {
        if (!members[c].empty()) nonempty.push_back(c);
    }
    if (nonempty.empty()) throw std::invalid_argument("resample requires a non-empty cluster model");

    ResamplePlan plan;
    plan.target_size = target_size;
    plan.seed = seed;
    plan.draws.reserve(target_size);
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < target_size; ++t) {
        const std::size_t c = nonempty[uniform_below(rng, nonempty.size())];
        const auto& m = members[c];
        plan.draws.push_back({c, m[uniform_below(rng, m.size())]});
    }
    return plan;
}

SemanticResampleResult semantic_resample(std::span<const std::pair<std::string, ActionRef>> actions, Backend& backend,
                                         std::size_t k, std::size_t target_size, std::uint64_t seed,
                                         const KMeansOptions& opts) {
    SemanticResampleResult out;
    out.table = dedup(actions);
    for (const auto& g : out.table.groups()) out.texts.push_back(g.canonical_text);
    if (out.texts.empty()) throw TooFewPoints("no actions to resample");

    std::vector<FloatVector> vectors(out.texts.size());
    parallel_for(out.texts.size(), std::max<std::size_t>(opts.threads, 4), [&](std::size_t i) {
        BackendRequest req{"", EmbedTextPayload{out.texts[i]}};
        req.request_id = content_request_id("embed_text", req.payload);
        vectors[i] = backend.call(req).vector();
    });
    PointSet points;
    for (const auto& v : vectors) points.push_back(std::span<const float>(v));

    out.model = kmeans(points, k, seed, opts);
    out.plan = resample(out.model, target_size, seed);
    return out;
}

nlohmann::json cluster_report(const ClusterModel& model) {
    return {{"k", model.k},
            {"seed", model.seed},
            {"inertia", model.inertia},
            {"iterations", model.iterations},
            {"sizes", model.cluster_sizes()}};
}

}  // namespace captree
