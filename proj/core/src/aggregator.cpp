#include "captree/aggregator.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <mutex>

#include "captree/error.hpp"
#include "captree/parallel.hpp"
#include "captree/resources.hpp"

namespace captree {

namespace {

std::string fixed1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

// Cuts at a UTF-8 code point boundary at or below `budget` bytes.
// The first `budget` code points of s.
std::string_view utf8_prefix(std::string_view s, std::size_t budget) {
    std::size_t seen = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if ((static_cast<unsigned char>(s[i]) & 0xC0) == 0x80) continue;
        if (seen == budget) return s.substr(0, i);
        ++seen;
    }
    return s;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

// Index of the brace closing the object opened at `open`, or npos.
std::size_t matching_brace(std::string_view text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) return i;
        }
    }
    return std::string_view::npos;
}

void serialize_node(const TreeOfCaptions& toc, NodeId id, int depth, int max_depth, std::string& out) {
    if (max_depth >= 0 && depth > max_depth) return;
    const SegmentNode& node = toc.tree.node(id);
    if (const CaptionNode* cap = toc.caption(id)) {
        if (!out.empty()) out += '\n';
        out.append(static_cast<std::size_t>(depth + 1), '#');
        out += " [";
        out += fixed1(node.start_s);
        out += "s \xE2\x80\x93 ";  // en dash
        out += fixed1(node.end_s);
        out += "s]\n";
        out += trim(cap->text);
        out += '\n';
    }
    if (node.children) {
        for (NodeId child : *node.children) serialize_node(toc, child, depth + 1, max_depth, out);
    }
}

}  // namespace

VideoMetadata metadata_from_json(const nlohmann::json& j) {
    VideoMetadata m;
    m.video_id = j.value("video_id", std::string{});
    m.title = j.value("title", std::string{});
    m.description = j.value("description", std::string{});
    if (j.contains("asr_transcript") && j["asr_transcript"].is_string()) {
        m.asr_transcript = j["asr_transcript"].get<std::string>();
    }
    m.duration_s = j.value("duration_s", 0.0);
    return m;
}

nlohmann::json to_json(const VideoMetadata& meta) {
    nlohmann::json j{{"video_id", meta.video_id},
                     {"title", meta.title},
                     {"description", meta.description},
                     {"duration_s", meta.duration_s}};
    j["asr_transcript"] = meta.asr_transcript ? nlohmann::json(*meta.asr_transcript) : nlohmann::json(nullptr);
    return j;
}

nlohmann::json to_json(const AnnotationRecord& rec) {
    return {{"video_id", rec.video_id},
            {"node_id", rec.node_id},
            {"start_s", rec.start_s},
            {"end_s", rec.end_s},
            {"summary", {{"brief", rec.summary_brief}, {"detailed", rec.summary_detailed}}},
            {"action", {{"brief", rec.action_brief}, {"detailed", rec.action_detailed}, {"actor", rec.actor}}},
            {"na_action", rec.na_action},
            {"rounds", rec.rounds},
            {"provenance",
             {{"completions", rec.completions},
              {"asr_truncated", rec.asr_truncated},
              {"prompt_template", resources::kAggregationPromptVersion}}}};
}

AnnotationRecord annotation_from_json(const nlohmann::json& j) {
    if (auto err = check_response_schema(j)) throw SchemaViolation(*err);
    AnnotationRecord r;
    r.video_id = j.at("video_id").get<std::string>();
    r.node_id = j.at("node_id").get<NodeId>();
    r.start_s = j.at("start_s").get<double>();
    r.end_s = j.at("end_s").get<double>();
    r.summary_brief = j["summary"]["brief"].get<std::string>();
    r.summary_detailed = j["summary"]["detailed"].get<std::string>();
    r.action_brief = j["action"]["brief"].get<std::string>();
    r.action_detailed = j["action"]["detailed"].get<std::string>();
    r.actor = j["action"]["actor"].get<std::string>();
    r.na_action = j.at("na_action").get<bool>();
    r.rounds = j.at("rounds").get<int>();
    if (j.contains("provenance")) {
        r.completions = j["provenance"].value("completions", 0);
        r.asr_truncated = j["provenance"].value("asr_truncated", false);
    }
    return r;
}

std::string serialize_dfs(const TreeOfCaptions& toc, NodeId subtree_root, int max_depth) {
    std::string out;
    serialize_node(toc, subtree_root, 0, max_depth, out);
    return out;
}

std::string format_metadata(const std::optional<VideoMetadata>& meta, std::size_t asr_char_budget, bool* truncated) {
    if (truncated) *truncated = false;
    if (!meta) return std::string(kNotApplicable);

    auto or_na = [](const std::string& s) { return s.empty() ? std::string(kNotApplicable) : s; };
    std::string asr(kNotApplicable);
    if (meta->asr_transcript && !meta->asr_transcript->empty()) {
        const std::string_view kept = utf8_prefix(*meta->asr_transcript, asr_char_budget);
        asr = std::string(kept);
        if (kept.size() < meta->asr_transcript->size()) {
            asr += " [...]";
            if (truncated) *truncated = true;
        }
    }
    std::string out;
    out += "Title: " + or_na(meta->title) + "\n";
    out += "Description: " + or_na(meta->description) + "\n";
    out += "ASR transcript: " + asr + "\n";
    out += "Duration: " + (meta->duration_s > 0 ? fixed1(meta->duration_s) + " seconds" : std::string(kNotApplicable));
    return out;
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
    std::string out;
    out.reserve(tmpl.size() * 2);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            std::size_t j = i + 1;
            while (j < tmpl.size() && (std::islower(static_cast<unsigned char>(tmpl[j])) || tmpl[j] == '_')) ++j;
            if (j < tmpl.size() && tmpl[j] == '}' && j > i + 1) {
                const std::string_view name = tmpl.substr(i + 1, j - i - 1);
                auto it = values.find(name);
                if (it == values.end())
                    throw MissingPlaceholder("no value for placeholder {" + std::string(name) + "}");
                out += it->second;
                i = j + 1;
                continue;
            }
        }
        out += tmpl[i++];
    }
    return out;
}

std::string build_prompt(const PromptContext& ctx) {
    const std::map<std::string, std::string, std::less<>> values{
        {"video_metadata", ctx.metadata_block.empty() ? std::string(kNotApplicable) : ctx.metadata_block},
        {"formatted_global_tree_of_captions", ctx.global_md},
        {"formatted_current_tree_of_captions", ctx.current_md},
        {"start_time", fixed1(ctx.start_time)},
        {"end_time", fixed1(ctx.end_time)},
        {"global_start_time", fixed1(ctx.global_start_time)},
        {"global_end_time", fixed1(ctx.global_end_time)},
    };
    return render_template(resources::aggregation_prompt_template(), values);
}

std::string build_refine_prompt(std::string_view original_prompt, std::string_view previous_response) {
    std::string out(original_prompt);
    if (!out.empty() && out.back() != '\n') out += '\n';
    out += "\n# Previous draft\n\n";
    out += previous_response;
    if (!previous_response.empty() && previous_response.back() != '\n') out += '\n';
    out += '\n';
    out += resources::refine_instruction();
    return out;
}

const nlohmann::json& response_schema() {
    static const nlohmann::json schema = [] {
        auto str = [](const char* d) { return nlohmann::json{{"type", "string"}, {"description", d}}; };
        nlohmann::json summary{{"type", "object"},
                               {"properties",
                                {{"brief", str("Single sentence video caption.")},
                                 {"detailed", str("Detailed, comprehensive description.")}}},
                               {"required", {"brief", "detailed"}}};
        nlohmann::json action{
            {"type", "object"},
            {"properties",
             {{"brief", str("A single verb phrase (no -ing forms) brifly summarizing the overall action content.")},
              {"detailed",
               str("A single imperitive sentence describing how the action is performed with more details.")},
              {"actor", str("Single sentece or an imformative noun phrase describing who is performing the action.")}}},
            {"required", {"brief", "detailed", "actor"}}};
        return nlohmann::json{{"type", "object"},
                              {"properties", {{"summary", summary}, {"action", action}}},
                              {"required", {"summary", "action"}}};
    }();
    return schema;
}

std::optional<std::string> check_response_schema(const nlohmann::json& j) {
    if (!j.is_object()) return "result is not a JSON object";
    auto check_object = [&](const char* name, std::initializer_list<const char*> fields) -> std::optional<std::string> {
        if (!j.contains(name)) return std::string("missing required field \"") + name + "\"";
        const auto& obj = j[name];
        if (!obj.is_object()) return std::string("\"") + name + "\" is not an object";
        for (const char* f : fields) {
            if (!obj.contains(f)) return std::string("missing \"") + name + "." + f + "\"";
            if (!obj[f].is_string()) return std::string("\"") + name + "." + f + "\" is not a string";
            if (trim(obj[f].get<std::string>()).empty()) return std::string("\"") + name + "." + f + "\" is empty";
        }
        return std::nullopt;
    };
    if (auto err = check_object("summary", {"brief", "detailed"})) return err;
    if (auto err = check_object("action", {"brief", "detailed", "actor"})) return err;
    return std::nullopt;
}

nlohmann::json extract_response_json(std::string_view text) {
    std::optional<nlohmann::json> best;
    bool best_has_keys = false;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] != '{') {
            ++i;
            continue;
        }
        const std::size_t close = matching_brace(text, i);
        if (close == std::string_view::npos) break;
        auto parsed = nlohmann::json::parse(text.substr(i, close - i + 1), nullptr, false);
        if (parsed.is_discarded() || !parsed.is_object()) {
            ++i;
            continue;
        }
        const bool has_keys = parsed.contains("summary") || parsed.contains("action");
        if (has_keys || !best_has_keys) {
            best = std::move(parsed);
            best_has_keys = has_keys;
        }
        i = close + 1;
    }
    if (!best) throw SchemaViolation("no JSON object found in model output");
    return *best;
}

namespace {

bool starts_with_ing_word(std::string_view s) {
    const auto end = s.find_first_of(" \t");
    std::string word(s.substr(0, end));
    while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.back()))) word.pop_back();
    if (word.size() < 5) return false;
    std::string tail = word.substr(word.size() - 3);
    for (auto& c : tail) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return tail == "ing";
}

}  // namespace

AnnotationRecord self_refine(const std::string& prompt, Backend& backend, const AggregatorOptions& opts,
                             RefineTrace* trace, std::string_view request_scope) {
    if (opts.rounds < 1) throw ConfigError("self-refine needs at least one round");

    AnnotationRecord rec;
    std::string previous;
    nlohmann::json parsed;
    for (int round = 1; round <= opts.rounds; ++round) {
        CompletePayload payload;
        payload.prompt = round == 1 ? prompt : build_refine_prompt(prompt, previous);
        payload.max_tokens = opts.max_tokens;
        payload.reasoning_effort = round == 1 ? opts.first_round_effort : opts.refine_effort;
        payload.response_schema = response_schema();

        std::string last_error;
        bool ok = false;
        for (int attempt = 0; attempt <= opts.parse_retries && !ok; ++attempt) {
            BackendRequest req{
                std::string(request_scope) + "/r" + std::to_string(round) + "a" + std::to_string(attempt), payload};
            const std::string text = backend.call(req).text();
            ++rec.completions;
            if (trace) {
                trace->prompts.push_back(payload.prompt);
                trace->responses.push_back(text);
            }
            try {
                parsed = extract_response_json(text);
                if (auto err = check_response_schema(parsed)) throw SchemaViolation(*err);
                previous = text;
                ok = true;
            } catch (const SchemaViolation& e) {
                last_error = e.what();
            }
        }
        if (!ok) {
            throw SchemaViolation("round " + std::to_string(round) + " output invalid after " +
                                  std::to_string(opts.parse_retries + 1) + " attempts: " + last_error);
        }
    }

    rec.rounds = opts.rounds;
    rec.summary_brief = trim(parsed["summary"]["brief"].get<std::string>());
    rec.summary_detailed = trim(parsed["summary"]["detailed"].get<std::string>());
    rec.action_brief = trim(parsed["action"]["brief"].get<std::string>());
    rec.action_detailed = trim(parsed["action"]["detailed"].get<std::string>());
    rec.actor = trim(parsed["action"]["actor"].get<std::string>());

    const bool brief_na = rec.action_brief == kNotApplicable;
    const bool detailed_na = rec.action_detailed == kNotApplicable;
    rec.na_action = brief_na && detailed_na;
    if (brief_na != detailed_na) rec.warnings.push_back("only one action description is N/A");
    if (!rec.na_action && starts_with_ing_word(rec.action_brief)) {
        rec.warnings.push_back("action.brief starts with an -ing form: " + rec.action_brief);
    }
    return rec;
}

PromptContext make_prompt_context(const TreeOfCaptions& toc, NodeId node, const std::optional<VideoMetadata>& meta,
                                  const AggregatorOptions& opts, bool* asr_truncated) {
    const SegmentNode& n = toc.tree.node(node);
    const SegmentNode& root = toc.tree.node(toc.tree.root());
    PromptContext ctx;
    ctx.current_md = serialize_dfs(toc, node, opts.current_depth);
    ctx.global_md = serialize_dfs(toc, root.id, opts.global_depth);
    ctx.metadata_block = format_metadata(meta, opts.asr_char_budget, asr_truncated);
    ctx.start_time = n.start_s;
    ctx.end_time = n.end_s;
    ctx.global_start_time = root.start_s;
    ctx.global_end_time = root.end_s;
    return ctx;
}

AnnotationResult annotate_video(const TreeOfCaptions& toc, const std::optional<VideoMetadata>& meta, Backend& backend,
                                const AggregatorOptions& opts, AnnotationHooks hooks) {
    AnnotationResult out;
    std::map<NodeId, AnnotationRecord> done = std::move(hooks.existing);

    std::vector<NodeId> todo;
    for (const SegmentNode& n : toc.tree.nodes()) {
        if (n.annotation_eligible && !done.contains(n.id)) todo.push_back(n.id);
    }
    // Drop carried-over records for nodes that are no longer eligible.
    std::erase_if(done, [&](const auto& kv) {
        return !toc.tree.contains(kv.first) || !toc.tree.node(kv.first).annotation_eligible;
    });

    std::mutex mu;
    parallel_for(todo.size(), opts.max_concurrency, [&](std::size_t i) {
        const NodeId id = todo[i];
        const SegmentNode& node = toc.tree.node(id);
        try {
            if (!toc.caption(id)) throw SchemaViolation("node has no caption");
            bool truncated = false;
            const std::string prompt = build_prompt(make_prompt_context(toc, id, meta, opts, &truncated));
            AnnotationRecord rec =
                self_refine(prompt, backend, opts, nullptr, toc.tree.video_id() + "/aggregate/" + std::to_string(id));
            rec.video_id = toc.tree.video_id();
            rec.node_id = id;
            rec.start_s = node.start_s;
            rec.end_s = node.end_s;
            rec.asr_truncated = truncated;
            if (hooks.on_record) hooks.on_record(rec);
            std::lock_guard lock(mu);
            done.emplace(id, std::move(rec));
        } catch (const Error& e) {
            std::lock_guard lock(mu);
            out.failures.push_back({id, e.what()});
        }
    });

    out.records.reserve(done.size());
    for (auto& [id, rec] : done) out.records.push_back(std::move(rec));
    std::sort(out.failures.begin(), out.failures.end(),
              [](const AnnotationFailure& a, const AnnotationFailure& b) { return a.node_id < b.node_id; });
    return out;
}

}  // namespace captree
