#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/backend.hpp"

namespace captree {

// Frame sampling and windowing for the video encoder. Frame counts here are
// in sampled frames (after subsampling) unless noted otherwise.
struct SamplingConfig {
    int subsample_stride{4};  // keep one of every N raw frames
    int window_len{64};
    int window_stride{8};
    double fps_native{30.0};

    void validate() const;
    double frame_period_s() const { return subsample_stride / fps_native; }
    // Sampled frame count for a video with raw_frames native frames.
    std::size_t sampled_frames(std::int64_t raw_frames) const;
};

struct FrameWindow {
    std::size_t start{0};
    std::size_t end{0};  // exclusive

    std::size_t size() const noexcept { return end - start; }
    bool covers(std::size_t frame) const noexcept { return start <= frame && frame < end; }
    friend bool operator==(const FrameWindow&, const FrameWindow&) = default;
};

// Windows start at multiples of window_stride. When the last regular window
// stops short of n_frames, one more window ending exactly at n_frames is
// appended. Sequences shorter than a window get a single truncated window.
std::vector<FrameWindow> plan_windows(std::size_t n_frames, const SamplingConfig& cfg);

struct WindowEmbedding {
    FrameWindow window;
    std::vector<std::vector<double>> frames;  // one vector per frame in window
};

// One embedding per sampled frame, stored row-major.
class FrameEmbeddingSequence {
public:
    FrameEmbeddingSequence() = default;
    FrameEmbeddingSequence(std::string video_id, std::size_t dim, double frame_period_s);

    const std::string& video_id() const noexcept { return video_id_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return timestamps_.size(); }
    bool empty() const noexcept { return timestamps_.empty(); }
    double frame_period_s() const noexcept { return frame_period_s_; }

    std::span<const double> timestamps() const noexcept { return timestamps_; }
    std::span<const double> row(std::size_t i) const;
    std::span<const double> values() const noexcept { return values_; }

    void push_back(double timestamp, std::span<const double> vec);

    // Throws std::invalid_argument when sizes disagree or timestamps are not
    // strictly increasing.
    void validate() const;

    friend bool operator==(const FrameEmbeddingSequence&, const FrameEmbeddingSequence&) = default;

private:
    std::string video_id_;
    std::size_t dim_{0};
    double frame_period_s_{0.0};
    std::vector<double> timestamps_;
    std::vector<double> values_;
};

// Averages overlapping window outputs into one vector per frame. The result
// does not depend on the order of `per_window`. Throws CoverageGap when a
// frame is covered by no window and DimensionMismatch on ragged input.
FrameEmbeddingSequence aggregate(std::span<const WindowEmbedding> per_window, std::size_t n_frames,
                                 const SamplingConfig& cfg, std::string video_id = {});

struct VideoSource {
    std::string video_id;
    std::string frame_source;
    std::int64_t raw_frame_count{0};
};

// Issues one /embed_window request per planned window (concurrently, up to
// max_concurrency) and aggregates the results.
FrameEmbeddingSequence embed_video(const VideoSource& video, const SamplingConfig& cfg, Backend& backend,
                                   std::size_t max_concurrency = 4);

nlohmann::json to_json(const FrameEmbeddingSequence& seq);
FrameEmbeddingSequence sequence_from_json(const nlohmann::json& j);

}  // namespace captree
