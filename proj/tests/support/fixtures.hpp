#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "captree/aggregator.hpp"
#include "captree/backend.hpp"
#include "captree/caption_tree.hpp"
#include "captree/embedding.hpp"
#include "captree/segmenter.hpp"
#include "oracles.hpp"

namespace captree_test {

// Removes itself on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

captree::FrameEmbeddingSequence sequence_from_rows(const Rows& rows, double period_s = 4.0 / 30.0,
                                                   const std::string& video_id = "seq");

// Hand-written segment tree. Spans are in seconds and must be multiples of
// the frame period; children partition their parent.
struct SpanSpec {
    double start_s{0.0};
    double end_s{0.0};
    std::vector<SpanSpec> children;
};

// Ids are assigned in pre-order (root = 0). Eligibility flags are set.
captree::SegmentTree span_tree(const SpanSpec& root, double period_s = 0.1,
                               const captree::EligibilityThresholds& thresholds = {},
                               const std::string& video_id = "fixture");

// Every regular file under dir keyed by relative path.
std::map<std::string, std::string> snapshot(const std::filesystem::path& dir);

std::string read_text(const std::filesystem::path& p);
void write_text(const std::filesystem::path& p, const std::string& content);

// Manifest with `count` synthetic videos of varying length and fps.
std::filesystem::path write_synthetic_manifest(const std::filesystem::path& dir, std::size_t count);

// Captioned 12 s tree used by the prompt golden file. Root 12 s; [0,5] holds
// an ineligible 0.4 s sliver; [5,12] splits 3 s / 4 s.
// Pre-order ids: 0 root, 1 [0,5], 2 [0,0.4], 3 [0.4,5], 4 [5,12], 5 [5,8], 6 [8,12].
captree::TreeOfCaptions fixture_toc();
captree::VideoMetadata fixture_meta();

captree::AnnotationRecord make_record(const std::string& video_id, captree::NodeId node, double start_s, double end_s,
                                      const std::string& action_brief, const std::string& summary_brief = "A scene.");

// Answers every call through a user-supplied function.
class ScriptedBackend final : public captree::Backend {
public:
    using Handler = std::function<captree::BackendResponse(const captree::BackendRequest&)>;
    explicit ScriptedBackend(Handler h) : handler_(std::move(h)) {}
    std::string describe() const override { return "scripted"; }

protected:
    captree::BackendResponse do_call(const captree::BackendRequest& req) override { return handler_(req); }

private:
    Handler handler_;
};

// Forwards to an inner backend and simulates a process kill (a non-library
// exception) once `budget` calls of `kind` have been made.
class CrashingBackend final : public captree::Backend {
public:
    CrashingBackend(captree::Backend& inner, captree::RequestKind kind, std::size_t budget)
        : inner_(inner), kind_(kind), budget_(budget) {}
    std::string describe() const override { return "crashing"; }

protected:
    captree::BackendResponse do_call(const captree::BackendRequest& req) override;

private:
    captree::Backend& inner_;
    captree::RequestKind kind_;
    std::size_t budget_;
    std::atomic<std::size_t> seen_{0};
};

struct SimulatedCrash : std::exception {
    const char* what() const noexcept override { return "simulated crash"; }
};

}  // namespace captree_test
