#include "captree/embedding.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "captree/error.hpp"
#include "captree/parallel.hpp"

namespace captree {

void SamplingConfig::validate() const {
    if (subsample_stride < 1) throw ConfigError("subsample_stride must be >= 1");
    if (window_len < 1) throw ConfigError("window_len must be >= 1");
    if (window_stride < 1) throw ConfigError("window_stride must be >= 1");
    if (window_stride > window_len) throw ConfigError("window_stride must not exceed window_len");
    if (!(fps_native > 0.0)) throw ConfigError("fps_native must be positive");
}

std::size_t SamplingConfig::sampled_frames(std::int64_t raw_frames) const {
    if (raw_frames <= 0) return 0;
    return static_cast<std::size_t>((raw_frames + subsample_stride - 1) / subsample_stride);
}

std::vector<FrameWindow> plan_windows(std::size_t n_frames, const SamplingConfig& cfg) {
    cfg.validate();
    if (n_frames == 0) throw std::invalid_argument("plan_windows requires n_frames >= 1");

    const auto len = static_cast<std::size_t>(cfg.window_len);
    const auto stride = static_cast<std::size_t>(cfg.window_stride);
    if (n_frames < len) return {{0, n_frames}};

    std::vector<FrameWindow> windows;
    std::size_t start = 0;
    for (; start + len <= n_frames; start += stride) windows.push_back({start, start + len});
    if (windows.back().end < n_frames) windows.push_back({n_frames - len, n_frames});
    return windows;
}

FrameEmbeddingSequence::FrameEmbeddingSequence(std::string video_id, std::size_t dim, double frame_period_s)
    : video_id_(std::move(video_id)), dim_(dim), frame_period_s_(frame_period_s) {}

std::span<const double> FrameEmbeddingSequence::row(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("frame index out of range");
    return std::span<const double>(values_).subspan(i * dim_, dim_);
}

void FrameEmbeddingSequence::push_back(double timestamp, std::span<const double> vec) {
    if (vec.size() != dim_) {
        throw DimensionMismatch("frame vector has " + std::to_string(vec.size()) + " dims, expected " +
                                std::to_string(dim_));
    }
    timestamps_.push_back(timestamp);
    values_.insert(values_.end(), vec.begin(), vec.end());
}

void FrameEmbeddingSequence::validate() const {
    if (dim_ == 0 && !timestamps_.empty()) throw std::invalid_argument("dim must be positive");
    if (values_.size() != timestamps_.size() * dim_) {
        throw std::invalid_argument("vector count does not match timestamp count");
    }
    for (std::size_t i = 1; i < timestamps_.size(); ++i) {
        if (!(timestamps_[i] > timestamps_[i - 1])) {
            throw std::invalid_argument("timestamps must be strictly increasing");
        }
    }
}

FrameEmbeddingSequence aggregate(std::span<const WindowEmbedding> per_window, std::size_t n_frames,
                                 const SamplingConfig& cfg, std::string video_id) {
    cfg.validate();
    if (n_frames == 0) throw std::invalid_argument("aggregate requires n_frames >= 1");
    if (per_window.empty()) throw CoverageGap("no windows supplied");

    const std::size_t dim = per_window.front().frames.empty() ? 0 : per_window.front().frames.front().size();
    if (dim == 0) throw DimensionMismatch("window embeddings must be non-empty");

    // Accumulate in a canonical window order so the floating-point sums do
    // not depend on the order windows arrived in.
    std::vector<std::size_t> order(per_window.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& wa = per_window[a].window;
        const auto& wb = per_window[b].window;
        return std::tie(wa.start, wa.end, a) < std::tie(wb.start, wb.end, b);
    });

    std::vector<double> sums(n_frames * dim, 0.0);
    std::vector<std::size_t> counts(n_frames, 0);
    for (std::size_t idx : order) {
        const auto& w = per_window[idx];
        if (w.window.end > n_frames || w.window.start >= w.window.end) {
            throw std::invalid_argument("window out of bounds");
        }
        if (w.frames.size() != w.window.size()) {
            throw DimensionMismatch("window has " + std::to_string(w.frames.size()) + " vectors for " +
                                    std::to_string(w.window.size()) + " frames");
        }
        for (std::size_t k = 0; k < w.frames.size(); ++k) {
            const auto& v = w.frames[k];
            if (v.size() != dim) throw DimensionMismatch("inconsistent embedding dimension across windows");
            const std::size_t f = w.window.start + k;
            double* acc = sums.data() + f * dim;
            for (std::size_t d = 0; d < dim; ++d) acc[d] += v[d];
            ++counts[f];
        }
    }

    FrameEmbeddingSequence seq(std::move(video_id), dim, cfg.frame_period_s());
    std::vector<double> mean(dim);
    for (std::size_t f = 0; f < n_frames; ++f) {
        if (counts[f] == 0) throw CoverageGap("frame " + std::to_string(f) + " is covered by no window");
        const double inv = 1.0 / static_cast<double>(counts[f]);
        for (std::size_t d = 0; d < dim; ++d) mean[d] = sums[f * dim + d] * inv;
        seq.push_back(static_cast<double>(f) * cfg.subsample_stride / cfg.fps_native, mean);
    }
    return seq;
}

FrameEmbeddingSequence embed_video(const VideoSource& video, const SamplingConfig& cfg, Backend& backend,
                                   std::size_t max_concurrency) {
    cfg.validate();
    const std::size_t n = cfg.sampled_frames(video.raw_frame_count);
    if (n == 0) throw EmptySequence("video " + video.video_id + " has no frames");

    const auto windows = plan_windows(n, cfg);
    std::vector<WindowEmbedding> results(windows.size());
    parallel_for(windows.size(), max_concurrency, [&](std::size_t i) {
        const FrameWindow w = windows[i];
        EmbedWindowPayload payload;
        payload.frames.reserve(w.size());
        for (std::size_t f = w.start; f < w.end; ++f) {
            const auto raw = static_cast<std::int64_t>(f) * cfg.subsample_stride;
            payload.frames.push_back({video.frame_source, raw, static_cast<double>(raw) / cfg.fps_native, 0});
        }
        BackendRequest req{video.video_id + "/embed/" + std::to_string(w.start), std::move(payload)};
        const BackendResponse resp = backend.call(req);
        const FloatMatrix& rows = resp.matrix();
        if (rows.size() != w.size()) {
            throw MalformedResponse("embed_window returned " + std::to_string(rows.size()) + " vectors for " +
                                    std::to_string(w.size()) + " frames");
        }
        results[i].window = w;
        results[i].frames.reserve(rows.size());
        for (const auto& r : rows) results[i].frames.emplace_back(r.begin(), r.end());
    });
    return aggregate(results, n, cfg, video.video_id);
}

nlohmann::json to_json(const FrameEmbeddingSequence& seq) {
    nlohmann::json vectors = nlohmann::json::array();
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const auto r = seq.row(i);
        vectors.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return {{"video_id", seq.video_id()},
            {"dim", seq.dim()},
            {"frame_period_s", seq.frame_period_s()},
            {"timestamps", std::vector<double>(seq.timestamps().begin(), seq.timestamps().end())},
            {"vectors", std::move(vectors)}};
}

FrameEmbeddingSequence sequence_from_json(const nlohmann::json& j) {
    FrameEmbeddingSequence seq(j.at("video_id").get<std::string>(), j.at("dim").get<std::size_t>(),
                               j.at("frame_period_s").get<double>());
    const auto& ts = j.at("timestamps");
    const auto& vs = j.at("vectors");
    if (!ts.is_array() || !vs.is_array() || ts.size() != vs.size()) {
        throw SchemaViolation("timestamps and vectors must be arrays of equal length");
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
        seq.push_back(ts[i].get<double>(), vs[i].get<std::vector<double>>());
    }
    seq.validate();
    return seq;
}

}  // namespace captree
