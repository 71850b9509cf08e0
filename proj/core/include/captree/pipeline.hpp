#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/aggregator.hpp"
#include "captree/backend.hpp"
#include "captree/caption_tree.hpp"
#include "captree/embedding.hpp"
#include "captree/segmenter.hpp"

namespace captree {

enum class Stage { embed, segment, caption, aggregate };
inline constexpr std::array<Stage, 4> kAllStages = {Stage::embed, Stage::segment, Stage::caption, Stage::aggregate};

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view name);
// Parses "embed,segment,..." and checks the list is a contiguous run of
// stages in pipeline order. Throws ConfigError.
std::vector<Stage> parse_stages(std::string_view list);

enum class StageStatus { pending, done, failed };
std::string_view to_string(StageStatus s);
StageStatus stage_status_from_string(std::string_view name);

struct ShardSpec {
    std::size_t index{0};
    std::size_t total{1};

    static ShardSpec parse(std::string_view spec);  // "i/n"
    bool contains(std::string_view video_id) const;
};

struct ManifestEntry {
    std::string video_id;
    std::string frame_source;
    double fps_native{30.0};
    std::int64_t frame_count{0};  // native frames
    std::optional<std::filesystem::path> metadata_path;
    std::optional<VideoMetadata> metadata;  // inline alternative to metadata_path
};

struct JobManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;  // relative metadata paths resolve here

    static JobManifest load(const std::filesystem::path& jsonl);
};

struct StageState {
    StageStatus status{StageStatus::pending};
    int attempts{0};
    std::optional<std::string> error;

    friend bool operator==(const StageState&, const StageState&) = default;
};

struct VideoState {
    std::string video_id;
    std::array<StageState, 4> stages;

    StageState& at(Stage s) { return stages[static_cast<std::size_t>(s)]; }
    const StageState& at(Stage s) const { return stages[static_cast<std::size_t>(s)]; }

    // Updates a stage, enforcing that done never reverts and that a stage is
    // done only after every earlier stage. Throws std::logic_error.
    void set(Stage s, StageState next);

    friend bool operator==(const VideoState&, const VideoState&) = default;
};

nlohmann::json to_json(const VideoState& state);
VideoState video_state_from_json(const nlohmann::json& j);

struct PipelineConfig {
    SamplingConfig sampling;
    EligibilityThresholds thresholds;
    CaptionOptions caption;
    AggregatorOptions aggregator;
    BackendSettings backend;
    std::uint64_t seed{17};
    ShardSpec shard;
    int max_attempts_per_stage{3};
    std::size_t workers{1};
    std::size_t embed_concurrency{4};

    void validate() const;
    // Reads the TOML subset described in parse_toml_subset; keys not present
    // keep their defaults. Unknown keys are a ConfigError.
    static PipelineConfig from_toml(std::string_view text);
    static PipelineConfig load(const std::filesystem::path& path);
};

// Minimal TOML reader: [table] headers, key = value with basic strings,
// integers, floats, booleans and flat arrays of those, and # comments.
// Returns an object of tables. Throws ConfigError.
nlohmann::json parse_toml_subset(std::string_view text);

// Artifact layout under an output directory.
struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path embeddings(std::string_view vid) const;
    std::filesystem::path tree(std::string_view vid) const;
    std::filesystem::path captions(std::string_view vid) const;
    std::filesystem::path captions_partial(std::string_view vid) const;
    std::filesystem::path annotations(std::string_view vid) const;
    std::filesystem::path annotations_partial(std::string_view vid) const;
    std::filesystem::path status(std::string_view vid) const;

    std::filesystem::path embeddings_dir() const { return root / "embeddings"; }
    std::filesystem::path trees_dir() const { return root / "trees"; }
    std::filesystem::path captions_dir() const { return root / "captions"; }
    std::filesystem::path annotations_dir() const { return root / "annotations"; }
    std::filesystem::path status_dir() const { return root / "status"; }
};

// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

struct StageFailure {
    std::string video_id;
    Stage stage{Stage::embed};
    std::string reason;
};

struct RunSummary {
    std::size_t videos_in_shard{0};
    std::array<std::size_t, 4> stages_run{};    // stage executions that completed
    std::array<std::size_t, 4> already_done{};  // skipped because done
    std::vector<StageFailure> failures;
    std::size_t videos_complete{0};  // every requested stage done

    std::size_t work_performed() const;
    bool all_done() const { return failures.empty() && videos_complete == videos_in_shard; }
};

// Processes the shard's entries through the requested stages. Per-video
// failures (captree::Error) are recorded; other exceptions abort the run.
RunSummary run(const JobManifest& manifest, const PipelineConfig& config, std::span<const Stage> stages,
               const std::filesystem::path& out_dir, Backend& backend);

struct Violation {
    enum class Kind { schema, cross_reference, state };
    Kind kind{Kind::schema};
    std::filesystem::path file;
    std::size_t line{0};  // 1-based for JSONL files, 0 otherwise
    std::string message;
};

std::string_view to_string(Violation::Kind k);

struct ValidationReport {
    std::vector<Violation> violations;
    std::size_t files_checked{0};

    bool ok() const noexcept { return violations.empty(); }
    std::size_t count(Violation::Kind k) const;
    nlohmann::json to_json() const;
};

ValidationReport validate(const std::filesystem::path& out_dir);

}  // namespace captree
