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
#include "captree/caption_tree.hpp"

namespace captree {

struct VideoMetadata {
    std::string video_id;
    std::string title;
    std::string description;
    std::optional<std::string> asr_transcript;
    double duration_s{0.0};
};

VideoMetadata metadata_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VideoMetadata& meta);

struct AnnotationRecord {
    std::string video_id;
    NodeId node_id{0};
    double start_s{0.0};
    double end_s{0.0};
    std::string summary_brief;
    std::string summary_detailed;
    std::string action_brief;
    std::string action_detailed;
    std::string actor;
    int rounds{0};
    bool na_action{false};
    // Provenance.
    int completions{0};  // /complete calls consumed, including retries
    bool asr_truncated{false};
    std::vector<std::string> warnings;  // soft-check findings, not persisted

    friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

nlohmann::json to_json(const AnnotationRecord& rec);
AnnotationRecord annotation_from_json(const nlohmann::json& j);

inline constexpr std::string_view kNotApplicable = "N/A";

struct PromptContext {
    std::string current_md;
    std::string global_md;
    std::string metadata_block;
    double start_time{0.0};
    double end_time{0.0};
    double global_start_time{0.0};
    double global_end_time{0.0};
};

struct AggregatorOptions {
    int rounds{3};
    int global_depth{2};
    int current_depth{-1};  // < 0: the whole subtree
    ReasoningEffort first_round_effort{ReasoningEffort::high};
    ReasoningEffort refine_effort{ReasoningEffort::high};
    int max_tokens{8192};
    int parse_retries{1};  // re-requests of a round whose output fails to parse
    std::size_t asr_char_budget{8000};
    std::size_t max_concurrency{4};

    friend bool operator==(const AggregatorOptions&, const AggregatorOptions&) = default;
};

// Depth-first, pre-order Markdown rendering of the captioned subtree rooted
// at `subtree_root`. Each captioned node contributes
//   <'#' x (depth+1)> [<start>s – <end>s]\n<caption>\n
// with entries separated by a blank line. Nodes more than max_depth levels
// below the root are omitted (max_depth < 0 keeps all); uncaptioned nodes
// emit nothing but their descendants are still visited.
std::string serialize_dfs(const TreeOfCaptions& toc, NodeId subtree_root, int max_depth);

// "Title: ...\nDescription: ...\nASR transcript: ...\nDuration: ...". Absent
// fields render as N/A; a missing metadata record renders as just "N/A".
// Sets *truncated when the transcript was cut to asr_char_budget.
std::string format_metadata(const std::optional<VideoMetadata>& meta, std::size_t asr_char_budget,
                            bool* truncated = nullptr);

// Substitutes {name} placeholders. Throws MissingPlaceholder when the
// template names a placeholder absent from `values`.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values);

// Instantiates the aggregation prompt template. Times render with one decimal.
std::string build_prompt(const PromptContext& ctx);

// The prompt used for refine rounds: original prompt, the previous draft and
// the refine instruction.
std::string build_refine_prompt(std::string_view original_prompt, std::string_view previous_response);

// Response schema sent with /complete requests (valid JSON Schema).
const nlohmann::json& response_schema();

// Returns an error description if `j` is not a valid aggregation result
// (objects "summary" {brief, detailed} and "action" {brief, detailed, actor},
// all non-empty strings), std::nullopt otherwise.
std::optional<std::string> check_response_schema(const nlohmann::json& j);

// Extracts the aggregation JSON object from free-form model output (the last
// parseable top-level object). Throws SchemaViolation.
nlohmann::json extract_response_json(std::string_view text);

struct RefineTrace {
    std::vector<std::string> prompts;    // one per /complete call, in order
    std::vector<std::string> responses;  // aligned with prompts
};

// Runs `rounds` Self-Refine rounds. Throws SchemaViolation when a round's
// output cannot be parsed after the allowed retries; backend errors
// propagate.
AnnotationRecord self_refine(const std::string& prompt, Backend& backend, const AggregatorOptions& opts = {},
                             RefineTrace* trace = nullptr, std::string_view request_scope = "complete");

PromptContext make_prompt_context(const TreeOfCaptions& toc, NodeId node, const std::optional<VideoMetadata>& meta,
                                  const AggregatorOptions& opts, bool* asr_truncated = nullptr);

struct AnnotationFailure {
    NodeId node_id{0};
    std::string reason;
};

struct AnnotationResult {
    std::vector<AnnotationRecord> records;  // ordered by node id
    std::vector<AnnotationFailure> failures;
};

struct AnnotationHooks {
    std::map<NodeId, AnnotationRecord> existing;
    std::function<void(const AnnotationRecord&)> on_record;
};

// Annotates every annotation-eligible node independently.
AnnotationResult annotate_video(const TreeOfCaptions& toc, const std::optional<VideoMetadata>& meta, Backend& backend,
                                const AggregatorOptions& opts = {}, AnnotationHooks hooks = {});

}  // namespace captree
