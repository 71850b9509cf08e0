#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/backend.hpp"
#include "captree/segmenter.hpp"

namespace captree {

enum class CaptionKind { frame, video };

std::string_view to_string(CaptionKind kind);
CaptionKind caption_kind_from_string(std::string_view name);

struct CaptionNode {
    NodeId node_id{0};
    CaptionKind kind{CaptionKind::frame};
    std::string text;
    std::vector<double> source_frames;  // seconds

    friend bool operator==(const CaptionNode&, const CaptionNode&) = default;
};

struct CaptionFailure {
    NodeId node_id{0};
    std::string reason;
};

struct TreeOfCaptions {
    SegmentTree tree;
    std::map<NodeId, CaptionNode> captions;
    std::vector<CaptionFailure> missing;  // sorted by node id

    const CaptionNode* caption(NodeId id) const;
    bool complete() const noexcept { return missing.empty(); }
};

struct CaptionOptions {
    std::string image_prompt{"Describe this image in detail."};
    std::string video_prompt{"Describe this video in detail."};
    int max_tokens{1024};
    int video_frames{32};
    int video_resolution{320};
    std::size_t max_concurrency{4};

    friend bool operator==(const CaptionOptions&, const CaptionOptions&) = default;
};

// Caption leaves get a mid-frame image caption; every other caption-eligible
// node gets a video caption.
CaptionKind caption_kind_for(const SegmentNode& node);

// Frame kind: the midpoint of [start_s, end_s]. Video kind: `video_frames`
// evenly spaced timestamps including both endpoints.
std::vector<double> select_frames(const SegmentNode& node, CaptionKind kind, int video_frames = 32);

struct CaptionSource {
    std::string frame_source;
    double fps_native{30.0};
};

struct CaptionHooks {
    // Captions already produced by an earlier attempt; these nodes are not
    // requested again.
    std::map<NodeId, CaptionNode> existing;
    // Called (possibly concurrently) for each newly produced caption.
    std::function<void(const CaptionNode&)> on_caption;
};

// Captions every caption-eligible node. Backend failures (captree::Error)
// are recorded per node under `missing`; any other exception propagates.
TreeOfCaptions caption_all(const SegmentTree& tree, const CaptionSource& source, Backend& backend,
                           const CaptionOptions& opts = {}, CaptionHooks hooks = {});

nlohmann::json to_json(const CaptionNode& caption, std::string_view video_id);
CaptionNode caption_from_json(const nlohmann::json& j);

}  // namespace captree
