#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/embedding.hpp"

namespace captree {

using NodeId = std::int64_t;

// Size, coordinate sum and centroid of a cluster of frames. The centroid is
// always sum / size, so merged clusters carry no accumulated rounding from
// repeated re-averaging.
struct ClusterStat {
    std::size_t size{0};
    std::vector<double> sum;
    std::vector<double> centroid;

    static ClusterStat singleton(std::span<const double> v);
    static ClusterStat from_centroid(std::size_t size, std::span<const double> centroid);
    static ClusterStat merge(const ClusterStat& a, const ClusterStat& b);
};

// Increase in total within-cluster sum of squares caused by merging a and b:
//   (n_a * n_b) / (n_a + n_b) * ||mu_a - mu_b||^2
double ward_cost(const ClusterStat& a, const ClusterStat& b);

struct SegmentNode {
    NodeId id{0};
    std::size_t lo{0};  // frame range [lo, hi)
    std::size_t hi{0};
    double start_s{0.0};
    double end_s{0.0};
    std::optional<NodeId> parent;
    std::optional<std::array<NodeId, 2>> children;  // left, right
    double merge_cost{0.0};                         // 0 for single frames
    bool caption_eligible{false};
    bool annotation_eligible{false};
    bool caption_leaf{false};

    double duration() const noexcept { return end_s - start_s; }
    bool is_leaf() const noexcept { return !children.has_value(); }
    friend bool operator==(const SegmentNode&, const SegmentNode&) = default;
};

struct EligibilityThresholds {
    double caption_s{0.5};     // caption_eligible iff duration > caption_s
    double annotation_s{4.0};  // annotation_eligible iff duration >= annotation_s

    friend bool operator==(const EligibilityThresholds&, const EligibilityThresholds&) = default;
};

// Binary merge hierarchy over contiguous frame ranges. Ids 0..n-1 are the
// single-frame leaves; internal nodes are numbered n, n+1, ... in merge order,
// so the root is the last node.
class SegmentTree {
public:
    SegmentTree() = default;
    SegmentTree(std::string video_id, std::vector<SegmentNode> nodes, NodeId root);

    const std::string& video_id() const noexcept { return video_id_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    NodeId root() const noexcept { return root_; }
    std::size_t frame_count() const;

    const SegmentNode& node(NodeId id) const;
    SegmentNode& node(NodeId id);
    bool contains(NodeId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < nodes_.size(); }
    std::span<const SegmentNode> nodes() const noexcept { return nodes_; }

    // Depth of a node below the root (root = 0).
    std::size_t depth(NodeId id) const;

    // Throws std::logic_error describing the first violated structural
    // invariant (single root, parent links, exact partition by children).
    void validate() const;

    friend bool operator==(const SegmentTree&, const SegmentTree&) = default;

private:
    std::string video_id_;
    std::vector<SegmentNode> nodes_;
    NodeId root_{0};
};

struct SegmentationResult {
    SegmentTree tree;
    std::vector<ClusterStat> stats;  // indexed by node id; empty unless requested
};

// Bottom-up Ward clustering restricted to temporally adjacent clusters.
// Each step merges the adjacent pair of minimal ward_cost, ties going to the
// pair with the smaller left frame index. Throws EmptySequence.
//
// Only active clusters hold statistics during the run; keep_node_stats
// retains every node's ClusterStat in the result (O(n * dim) extra memory).
SegmentationResult segment(const FrameEmbeddingSequence& seq, bool keep_node_stats = false);
SegmentTree build_tree(const FrameEmbeddingSequence& seq);

// Sets caption_eligible, annotation_eligible and caption_leaf on every node
// without changing the topology.
SegmentTree mark_eligibility(SegmentTree tree, const EligibilityThresholds& thresholds = {});

nlohmann::json to_json(const SegmentTree& tree, const EligibilityThresholds& thresholds);
SegmentTree tree_from_json(const nlohmann::json& j);
EligibilityThresholds thresholds_from_json(const nlohmann::json& j);

}  // namespace captree
