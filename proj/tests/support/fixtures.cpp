#include "fixtures.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace captree_test {

TempDir::TempDir() {
    std::random_device rd;
    const auto base = fs::temp_directory_path();
    for (;;) {
        path_ = base / ("captree-test-" + std::to_string(rd()));
        if (fs::create_directory(path_)) break;
    }
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

captree::FrameEmbeddingSequence sequence_from_rows(const Rows& rows, double period_s, const std::string& video_id) {
    captree::FrameEmbeddingSequence seq(video_id, rows.empty() ? 1 : rows.front().size(), period_s);
    for (std::size_t i = 0; i < rows.size(); ++i) seq.push_back(static_cast<double>(i) * period_s, rows[i]);
    return seq;
}

namespace {

captree::NodeId add_span(const SpanSpec& spec, double period, std::optional<captree::NodeId> parent,
                         std::vector<captree::SegmentNode>& nodes) {
    const auto id = static_cast<captree::NodeId>(nodes.size());
    captree::SegmentNode n;
    n.id = id;
    n.lo = static_cast<std::size_t>(std::llround(spec.start_s / period));
    n.hi = static_cast<std::size_t>(std::llround(spec.end_s / period));
    n.start_s = spec.start_s;
    n.end_s = spec.end_s;
    n.parent = parent;
    nodes.push_back(n);
    if (!spec.children.empty()) {
        if (spec.children.size() != 2) throw std::invalid_argument("span_tree nodes have 0 or 2 children");
        const auto l = add_span(spec.children[0], period, id, nodes);
        const auto r = add_span(spec.children[1], period, id, nodes);
        nodes[static_cast<std::size_t>(id)].children = std::array<captree::NodeId, 2>{l, r};
        nodes[static_cast<std::size_t>(id)].merge_cost = 1.0;
    }
    return id;
}

}  // namespace

captree::SegmentTree span_tree(const SpanSpec& root, double period_s, const captree::EligibilityThresholds& thresholds,
                               const std::string& video_id) {
    std::vector<captree::SegmentNode> nodes;
    add_span(root, period_s, std::nullopt, nodes);
    captree::SegmentTree tree(video_id, std::move(nodes), 0);
    tree.validate();
    return captree::mark_eligibility(std::move(tree), thresholds);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read_text(e.path());
    }
    return out;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& content) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

fs::path write_synthetic_manifest(const fs::path& dir, std::size_t count) {
    fs::create_directories(dir / "meta");
    std::string lines;
    for (std::size_t i = 0; i < count; ++i) {
        const std::string vid = "video" + std::to_string(i);
        const double fps = (i % 2 == 0) ? 30.0 : 25.0;
        const std::int64_t frames = static_cast<std::int64_t>(fps * (20.0 + 17.0 * static_cast<double>(i % 5)));
        nlohmann::json entry{
            {"video_id", vid}, {"frame_source", "frames/" + vid}, {"fps_native", fps}, {"frame_count", frames}};
        if (i % 3 != 2) {
            nlohmann::json meta{{"title", "How to build thing " + std::to_string(i)},
                                {"description", "A short tutorial."},
                                {"duration_s", static_cast<double>(frames) / fps}};
            if (i % 3 == 0) meta["asr_transcript"] = "first we prepare the parts then we assemble them";
            write_text(dir / "meta" / (vid + ".json"), meta.dump());
            entry["metadata"] = "meta/" + vid + ".json";
        }
        lines += entry.dump() + "\n";
    }
    write_text(dir / "manifest.jsonl", lines);
    return dir / "manifest.jsonl";
}

captree::TreeOfCaptions fixture_toc() {
    using captree::NodeId;
    captree::TreeOfCaptions toc;
    toc.tree = span_tree(
        {0.0, 12.0, {{0.0, 5.0, {{0.0, 0.4, {}}, {0.4, 5.0, {}}}}, {5.0, 12.0, {{5.0, 8.0, {}}, {8.0, 12.0, {}}}}}},
        0.1, {}, "birdhouse");
    const std::map<NodeId, std::string> text{
        {0, "A person builds a wooden birdhouse in a garage."},
        {1, "The person measures and cuts boards."},
        {3, "A saw cuts along a pencil line."},
        {4, "The person nails the panels together."},
        {5, "Hands hold two panels at a right angle."},
        {6, "A hammer drives nails into the roof."},
    };
    for (const auto& [id, t] : text) {
        const auto& n = toc.tree.node(id);
        const auto kind = captree::caption_kind_for(n);
        toc.captions[id] = {id, kind, t, captree::select_frames(n, kind)};
    }
    return toc;
}

captree::VideoMetadata fixture_meta() {
    return {"birdhouse", "Building a birdhouse", "Step by step.", "first cut the boards then nail them", 12.0};
}

captree::AnnotationRecord make_record(const std::string& video_id, captree::NodeId node, double start_s, double end_s,
                                      const std::string& action_brief, const std::string& summary_brief) {
    captree::AnnotationRecord r;
    r.video_id = video_id;
    r.node_id = node;
    r.start_s = start_s;
    r.end_s = end_s;
    r.summary_brief = summary_brief;
    r.summary_detailed = summary_brief + " More detail follows here.";
    r.action_brief = action_brief;
    r.action_detailed = action_brief == "N/A" ? "N/A" : action_brief + " carefully.";
    r.actor = "A person.";
    r.rounds = 3;
    r.na_action = action_brief == "N/A";
    r.completions = 3;
    return r;
}

captree::BackendResponse CrashingBackend::do_call(const captree::BackendRequest& req) {
    if (req.kind() == kind_ && seen_.fetch_add(1) >= budget_) throw SimulatedCrash{};
    return inner_.call(req);
}

}  // namespace captree_test
