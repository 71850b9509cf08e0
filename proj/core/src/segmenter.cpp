#include "captree/segmenter.hpp"

#include <limits>
#include <queue>
#include <stdexcept>
#include <tuple>

#include "captree/error.hpp"

namespace captree {

ClusterStat ClusterStat::singleton(std::span<const double> v) {
    return {1, {v.begin(), v.end()}, {v.begin(), v.end()}};
}

ClusterStat ClusterStat::from_centroid(std::size_t size, std::span<const double> centroid) {
    if (size == 0) throw std::invalid_argument("cluster size must be positive");
    ClusterStat s{size, {}, {centroid.begin(), centroid.end()}};
    s.sum.reserve(centroid.size());
    for (double c : centroid) s.sum.push_back(c * static_cast<double>(size));
    return s;
}

ClusterStat ClusterStat::merge(const ClusterStat& a, const ClusterStat& b) {
    if (a.sum.size() != b.sum.size()) throw DimensionMismatch("cannot merge clusters of different dimension");
    ClusterStat out;
    out.size = a.size + b.size;
    out.sum.resize(a.sum.size());
    out.centroid.resize(a.sum.size());
    const double n = static_cast<double>(out.size);
    for (std::size_t d = 0; d < a.sum.size(); ++d) {
        out.sum[d] = a.sum[d] + b.sum[d];
        out.centroid[d] = out.sum[d] / n;
    }
    return out;
}

double ward_cost(const ClusterStat& a, const ClusterStat& b) {
    if (a.size == 0 || b.size == 0) throw std::invalid_argument("ward_cost requires non-empty clusters");
    if (a.centroid.size() != b.centroid.size()) {
        throw DimensionMismatch("ward_cost: centroid dimensions " + std::to_string(a.centroid.size()) + " and " +
                                std::to_string(b.centroid.size()) + " differ");
    }
    double dist2 = 0.0;
    for (std::size_t d = 0; d < a.centroid.size(); ++d) {
        const double diff = a.centroid[d] - b.centroid[d];
        dist2 += diff * diff;
    }
    const double na = static_cast<double>(a.size);
    const double nb = static_cast<double>(b.size);
    return na * nb / (na + nb) * dist2;
}

SegmentTree::SegmentTree(std::string video_id, std::vector<SegmentNode> nodes, NodeId root)
    : video_id_(std::move(video_id)), nodes_(std::move(nodes)), root_(root) {}

std::size_t SegmentTree::frame_count() const { return nodes_.empty() ? 0 : node(root_).hi; }

const SegmentNode& SegmentTree::node(NodeId id) const {
    if (!contains(id)) throw std::out_of_range("node id " + std::to_string(id) + " not in tree");
    return nodes_[static_cast<std::size_t>(id)];
}

SegmentNode& SegmentTree::node(NodeId id) {
    if (!contains(id)) throw std::out_of_range("node id " + std::to_string(id) + " not in tree");
    return nodes_[static_cast<std::size_t>(id)];
}

std::size_t SegmentTree::depth(NodeId id) const {
    std::size_t d = 0;
    for (const SegmentNode* n = &node(id); n->parent; n = &node(*n->parent)) {
        if (++d > nodes_.size()) throw std::logic_error("parent cycle");
    }
    return d;
}

void SegmentTree::validate() const {
    auto fail = [](const std::string& msg) { throw std::logic_error(msg); };
    if (nodes_.empty()) fail("tree has no nodes");
    if (!contains(root_)) fail("root id out of range");
    if (node(root_).parent) fail("root has a parent");
    if (node(root_).lo != 0) fail("root does not start at frame 0");

    std::size_t roots = 0;
    std::size_t leaf_frames = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const SegmentNode& n = nodes_[i];
        const std::string where = "node " + std::to_string(i) + ": ";
        if (n.id != static_cast<NodeId>(i)) fail(where + "id does not match position");
        if (n.lo >= n.hi) fail(where + "empty frame range");
        if (!(n.end_s > n.start_s)) fail(where + "non-positive duration");
        if (!n.parent) {
            ++roots;
        } else {
            if (!contains(*n.parent)) fail(where + "dangling parent");
            const auto& pc = node(*n.parent).children;
            if (!pc || ((*pc)[0] != n.id && (*pc)[1] != n.id)) fail(where + "parent does not list it as a child");
        }
        if (n.children) {
            const auto [l, r] = *n.children;
            if (!contains(l) || !contains(r)) fail(where + "dangling child");
            const SegmentNode& left = node(l);
            const SegmentNode& right = node(r);
            if (left.parent != n.id || right.parent != n.id) fail(where + "child parent link mismatch");
            if (left.lo != n.lo || left.hi != right.lo || right.hi != n.hi) {
                fail(where + "children do not partition the parent range");
            }
            if (n.merge_cost < 0.0) fail(where + "negative merge cost");
        } else {
            leaf_frames += n.hi - n.lo;
        }
    }
    if (roots != 1) fail("expected exactly one root, found " + std::to_string(roots));
    if (leaf_frames != node(root_).hi) fail("leaf ranges do not partition the frame range");
}

namespace {

struct Candidate {
    double cost;
    std::size_t left;  // slot (= first frame) of the left cluster
    std::size_t right;
    std::uint64_t left_version;
    std::uint64_t right_version;
};

struct CandidateAfter {
    bool operator()(const Candidate& a, const Candidate& b) const {
        return std::tie(a.cost, a.left) > std::tie(b.cost, b.left);
    }
};

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

}  // namespace

SegmentationResult segment(const FrameEmbeddingSequence& seq, bool keep_node_stats) {
    const std::size_t n = seq.size();
    if (n == 0) throw EmptySequence("cannot segment an empty frame sequence");
    seq.validate();

    const auto ts = seq.timestamps();
    const double period = seq.frame_period_s();
    auto end_time = [&](std::size_t hi) { return ts[hi - 1] + period; };

    std::vector<SegmentNode> nodes;
    std::vector<ClusterStat> slot_stats;  // by slot
    std::vector<ClusterStat> node_stats;  // by node id, only when requested
    nodes.reserve(2 * n - 1);
    slot_stats.reserve(n);
    if (keep_node_stats) node_stats.reserve(2 * n - 1);
    for (std::size_t f = 0; f < n; ++f) {
        SegmentNode leaf;
        leaf.id = static_cast<NodeId>(f);
        leaf.lo = f;
        leaf.hi = f + 1;
        leaf.start_s = ts[f];
        leaf.end_s = end_time(f + 1);
        nodes.push_back(leaf);
        slot_stats.push_back(ClusterStat::singleton(seq.row(f)));
        if (keep_node_stats) node_stats.push_back(slot_stats.back());
    }

    // Active clusters form a doubly linked list of slots keyed by their first
    // frame. A slot's version bumps whenever its cluster changes, which
    // invalidates queued candidates lazily.
    std::vector<std::size_t> prev(n), next(n), node_of(n);
    std::vector<std::uint64_t> version(n, 0);
    std::vector<bool> alive(n, true);
    for (std::size_t f = 0; f < n; ++f) {
        prev[f] = f == 0 ? kNone : f - 1;
        next[f] = f + 1 == n ? kNone : f + 1;
        node_of[f] = f;
    }

    std::priority_queue<Candidate, std::vector<Candidate>, CandidateAfter> heap;
    auto push_pair = [&](std::size_t left, std::size_t right) {
        heap.push({ward_cost(slot_stats[left], slot_stats[right]), left, right, version[left], version[right]});
    };
    for (std::size_t f = 0; f + 1 < n; ++f) push_pair(f, f + 1);

    while (!heap.empty()) {
        const Candidate c = heap.top();
        heap.pop();
        if (!alive[c.left] || !alive[c.right] || version[c.left] != c.left_version ||
            version[c.right] != c.right_version) {
            continue;
        }

        const std::size_t left_node = node_of[c.left];
        const std::size_t right_node = node_of[c.right];
        const auto id = static_cast<NodeId>(nodes.size());

        SegmentNode parent;
        parent.id = id;
        parent.lo = nodes[left_node].lo;
        parent.hi = nodes[right_node].hi;
        parent.start_s = nodes[left_node].start_s;
        parent.end_s = nodes[right_node].end_s;
        parent.children = std::array<NodeId, 2>{static_cast<NodeId>(left_node), static_cast<NodeId>(right_node)};
        parent.merge_cost = c.cost;
        nodes[left_node].parent = id;
        nodes[right_node].parent = id;
        nodes.push_back(parent);
        slot_stats[c.left] = ClusterStat::merge(slot_stats[c.left], slot_stats[c.right]);
        slot_stats[c.right] = {};
        if (keep_node_stats) node_stats.push_back(slot_stats[c.left]);

        alive[c.right] = false;
        node_of[c.left] = static_cast<std::size_t>(id);
        ++version[c.left];
        next[c.left] = next[c.right];
        if (next[c.left] != kNone) prev[next[c.left]] = c.left;

        if (prev[c.left] != kNone) push_pair(prev[c.left], c.left);
        if (next[c.left] != kNone) push_pair(c.left, next[c.left]);
    }

    const auto root = static_cast<NodeId>(nodes.size() - 1);
    return {SegmentTree(seq.video_id(), std::move(nodes), root), std::move(node_stats)};
}

SegmentTree build_tree(const FrameEmbeddingSequence& seq) { return segment(seq).tree; }

SegmentTree mark_eligibility(SegmentTree tree, const EligibilityThresholds& thresholds) {
    for (std::size_t i = 0; i < tree.size(); ++i) {
        SegmentNode& n = tree.node(static_cast<NodeId>(i));
        const double d = n.duration();
        n.caption_eligible = d > thresholds.caption_s;
        n.annotation_eligible = d >= thresholds.annotation_s;
    }
    for (std::size_t i = 0; i < tree.size(); ++i) {
        SegmentNode& n = tree.node(static_cast<NodeId>(i));
        bool children_ineligible = true;
        if (n.children) {
            for (NodeId c : *n.children) children_ineligible = children_ineligible && !tree.node(c).caption_eligible;
        }
        n.caption_leaf = n.caption_eligible && children_ineligible;
    }
    return tree;
}

nlohmann::json to_json(const SegmentTree& tree, const EligibilityThresholds& thresholds) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const SegmentNode& n : tree.nodes()) {
        nlohmann::json children = nlohmann::json::array();
        if (n.children) children = {(*n.children)[0], (*n.children)[1]};
        nodes.push_back({{"id", n.id},
                         {"parent", n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr)},
                         {"children", std::move(children)},
                         {"lo", n.lo},
                         {"hi", n.hi},
                         {"start_s", n.start_s},
                         {"end_s", n.end_s},
                         {"merge_cost", n.merge_cost},
                         {"caption_eligible", n.caption_eligible},
                         {"annotation_eligible", n.annotation_eligible},
                         {"caption_leaf", n.caption_leaf}});
    }
    return {{"video_id", tree.video_id()},
            {"root", tree.root()},
            {"thresholds", {{"caption_s", thresholds.caption_s}, {"annotation_s", thresholds.annotation_s}}},
            {"nodes", std::move(nodes)}};
}

SegmentTree tree_from_json(const nlohmann::json& j) {
    std::vector<SegmentNode> nodes;
    for (const auto& jn : j.at("nodes")) {
        SegmentNode n;
        n.id = jn.at("id").get<NodeId>();
        if (!jn.at("parent").is_null()) n.parent = jn["parent"].get<NodeId>();
        const auto& ch = jn.at("children");
        if (ch.size() == 2) {
            n.children = std::array<NodeId, 2>{ch[0].get<NodeId>(), ch[1].get<NodeId>()};
        } else if (!ch.empty()) {
            throw SchemaViolation("node " + std::to_string(n.id) + " has " + std::to_string(ch.size()) + " children");
        }
        n.lo = jn.at("lo").get<std::size_t>();
        n.hi = jn.at("hi").get<std::size_t>();
        n.start_s = jn.at("start_s").get<double>();
        n.end_s = jn.at("end_s").get<double>();
        n.merge_cost = jn.at("merge_cost").get<double>();
        n.caption_eligible = jn.at("caption_eligible").get<bool>();
        n.annotation_eligible = jn.at("annotation_eligible").get<bool>();
        n.caption_leaf = jn.at("caption_leaf").get<bool>();
        nodes.push_back(std::move(n));
    }
    return SegmentTree(j.at("video_id").get<std::string>(), std::move(nodes), j.at("root").get<NodeId>());
}

EligibilityThresholds thresholds_from_json(const nlohmann::json& j) {
    EligibilityThresholds t;
    if (j.contains("thresholds")) {
        t.caption_s = j["thresholds"].at("caption_s").get<double>();
        t.annotation_s = j["thresholds"].at("annotation_s").get<double>();
    }
    return t;
}

}  // namespace captree
