#include "captree/caption_tree.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>

#include "captree/error.hpp"
#include "captree/parallel.hpp"

namespace captree {

std::string_view to_string(CaptionKind kind) { return kind == CaptionKind::frame ? "frame" : "video"; }

CaptionKind caption_kind_from_string(std::string_view name) {
    if (name == "frame") return CaptionKind::frame;
    if (name == "video") return CaptionKind::video;
    throw std::invalid_argument("unknown caption kind: " + std::string(name));
}

const CaptionNode* TreeOfCaptions::caption(NodeId id) const {
    auto it = captions.find(id);
    return it == captions.end() ? nullptr : &it->second;
}

CaptionKind caption_kind_for(const SegmentNode& node) {
    return node.caption_leaf ? CaptionKind::frame : CaptionKind::video;
}

std::vector<double> select_frames(const SegmentNode& node, CaptionKind kind, int video_frames) {
    if (kind == CaptionKind::frame) return {(node.start_s + node.end_s) / 2.0};
    if (video_frames < 2) throw std::invalid_argument("video captions need at least two frames");

    const double span = node.end_s - node.start_s;
    const int last = video_frames - 1;
    std::vector<double> ts(static_cast<std::size_t>(video_frames));
    for (int i = 0; i < video_frames; ++i) ts[static_cast<std::size_t>(i)] = node.start_s + i * span / last;
    ts.back() = node.end_s;
    return ts;
}

namespace {

// The native frame showing time t. The segment end is exclusive, so a
// timestamp at the end resolves to the last frame that starts before it.
FrameRef frame_at(const CaptionSource& source, double t, double end_s, int resolution) {
    std::int64_t index = static_cast<std::int64_t>(std::floor(t * source.fps_native + 1e-9));
    const auto last = static_cast<std::int64_t>(std::ceil(end_s * source.fps_native - 1e-9)) - 1;
    index = std::min(index, last);
    return {source.frame_source, std::max<std::int64_t>(0, index), t, resolution};
}

}  // namespace

TreeOfCaptions caption_all(const SegmentTree& tree, const CaptionSource& source, Backend& backend,
                           const CaptionOptions& opts, CaptionHooks hooks) {
    TreeOfCaptions out;
    out.tree = tree;

    std::vector<NodeId> todo;
    for (const SegmentNode& n : tree.nodes()) {
        if (!n.caption_eligible) continue;
        if (auto it = hooks.existing.find(n.id); it != hooks.existing.end()) {
            out.captions.emplace(n.id, it->second);
        } else {
            todo.push_back(n.id);
        }
    }

    std::mutex mu;
    parallel_for(todo.size(), opts.max_concurrency, [&](std::size_t i) {
        const SegmentNode& node = tree.node(todo[i]);
        const CaptionKind kind = caption_kind_for(node);
        CaptionNode caption{node.id, kind, {}, select_frames(node, kind, opts.video_frames)};

        BackendRequest req;
        req.request_id = tree.video_id() + "/caption/" + std::to_string(node.id);
        if (kind == CaptionKind::frame) {
            req.payload = CaptionImagePayload{frame_at(source, caption.source_frames.front(), node.end_s, 0),
                                              opts.image_prompt, opts.max_tokens};
        } else {
            CaptionVideoPayload p;
            p.prompt = opts.video_prompt;
            p.max_tokens = opts.max_tokens;
            for (double t : caption.source_frames)
                p.frames.push_back(frame_at(source, t, node.end_s, opts.video_resolution));
            req.payload = std::move(p);
        }

        try {
            caption.text = backend.call(req).text();
            if (caption.text.find_first_not_of(" \t\r\n") == std::string::npos) {
                throw MalformedResponse("empty caption");
            }
        } catch (const Error& e) {
            std::lock_guard lock(mu);
            out.missing.push_back({node.id, e.what()});
            return;
        }
        if (hooks.on_caption) hooks.on_caption(caption);
        std::lock_guard lock(mu);
        out.captions.emplace(node.id, std::move(caption));
    });

    std::sort(out.missing.begin(), out.missing.end(),
              [](const CaptionFailure& a, const CaptionFailure& b) { return a.node_id < b.node_id; });
    return out;
}

nlohmann::json to_json(const CaptionNode& caption, std::string_view video_id) {
    return {{"video_id", video_id},
            {"node_id", caption.node_id},
            {"kind", to_string(caption.kind)},
            {"text", caption.text},
            {"source_frames", caption.source_frames}};
}

CaptionNode caption_from_json(const nlohmann::json& j) {
    CaptionNode c;
    c.node_id = j.at("node_id").get<NodeId>();
    c.kind = caption_kind_from_string(j.at("kind").get<std::string>());
    c.text = j.at("text").get<std::string>();
    c.source_frames = j.at("source_frames").get<std::vector<double>>();
    if (c.text.empty()) throw SchemaViolation("caption text is empty");
    return c;
}

}  // namespace captree
