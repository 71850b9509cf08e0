#include "captree/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "captree/error.hpp"
#include "captree/hashing.hpp"
#include "captree/parallel.hpp"

namespace fs = std::filesystem;

namespace captree {

// ---------------------------------------------------------------------------
// Stages and state

namespace {

constexpr std::array<std::string_view, 4> kStageNames = {"embed", "segment", "caption", "aggregate"};

std::string trim_copy(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

bool valid_video_id(std::string_view id) {
    if (id.empty() || id == "." || id == "..") return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw StorageError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string_view to_string(Stage s) { return kStageNames.at(static_cast<std::size_t>(s)); }

Stage stage_from_string(std::string_view name) {
    for (std::size_t i = 0; i < kStageNames.size(); ++i) {
        if (kStageNames[i] == name) return static_cast<Stage>(i);
    }
    throw ConfigError("unknown stage: " + std::string(name));
}

std::vector<Stage> parse_stages(std::string_view list) {
    std::vector<Stage> out;
    std::size_t pos = 0;
    while (pos <= list.size()) {
        const auto comma = std::min(list.find(',', pos), list.size());
        const std::string name = trim_copy(list.substr(pos, comma - pos));
        if (!name.empty()) out.push_back(stage_from_string(name));
        pos = comma + 1;
    }
    if (out.empty()) throw ConfigError("no stages requested");
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (static_cast<int>(out[i]) != static_cast<int>(out[i - 1]) + 1) {
            throw ConfigError("stages must be a contiguous run in pipeline order (embed,segment,caption,aggregate)");
        }
    }
    return out;
}

std::string_view to_string(StageStatus s) {
    switch (s) {
        case StageStatus::pending:
            return "pending";
        case StageStatus::done:
            return "done";
        case StageStatus::failed:
            return "failed";
    }
    return "pending";
}

StageStatus stage_status_from_string(std::string_view name) {
    if (name == "pending") return StageStatus::pending;
    if (name == "done") return StageStatus::done;
    if (name == "failed") return StageStatus::failed;
    throw SchemaViolation("unknown stage status: " + std::string(name));
}

ShardSpec ShardSpec::parse(std::string_view spec) {
    const auto slash = spec.find('/');
    if (slash == std::string_view::npos) throw ConfigError("shard must look like i/n, got " + std::string(spec));
    ShardSpec s;
    auto parse_num = [&](std::string_view part, std::size_t& dst) {
        auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), dst);
        if (ec != std::errc{} || ptr != part.data() + part.size()) {
            throw ConfigError("bad shard number in " + std::string(spec));
        }
    };
    parse_num(spec.substr(0, slash), s.index);
    parse_num(spec.substr(slash + 1), s.total);
    if (s.total == 0 || s.index >= s.total) throw ConfigError("shard index must be < total, got " + std::string(spec));
    return s;
}

bool ShardSpec::contains(std::string_view video_id) const { return fnv1a64(video_id) % total == index; }

void VideoState::set(Stage s, StageState next) {
    StageState& cur = at(s);
    if (cur.status == StageStatus::done && next.status != StageStatus::done) {
        throw std::logic_error("stage " + std::string(to_string(s)) + " of " + video_id + " cannot leave done");
    }
    if (next.status == StageStatus::done) {
        for (Stage prior : kAllStages) {
            if (prior == s) break;
            if (at(prior).status != StageStatus::done) {
                throw std::logic_error("stage " + std::string(to_string(s)) + " of " + video_id +
                                       " cannot be done before " + std::string(to_string(prior)));
            }
        }
    }
    cur = std::move(next);
}

nlohmann::json to_json(const VideoState& state) {
    nlohmann::json stages = nlohmann::json::object();
    for (Stage s : kAllStages) {
        const StageState& st = state.at(s);
        stages[std::string(to_string(s))] = {{"status", to_string(st.status)},
                                             {"attempts", st.attempts},
                                             {"error", st.error ? nlohmann::json(*st.error) : nlohmann::json(nullptr)}};
    }
    return {{"video_id", state.video_id}, {"stages", std::move(stages)}};
}

VideoState video_state_from_json(const nlohmann::json& j) {
    VideoState state;
    state.video_id = j.at("video_id").get<std::string>();
    for (Stage s : kAllStages) {
        const auto& js = j.at("stages").at(std::string(to_string(s)));
        StageState& st = state.at(s);
        st.status = stage_status_from_string(js.at("status").get<std::string>());
        st.attempts = js.at("attempts").get<int>();
        if (!js.at("error").is_null()) st.error = js["error"].get<std::string>();
    }
    return state;
}

// ---------------------------------------------------------------------------
// Manifest

JobManifest JobManifest::load(const fs::path& jsonl) {
    std::ifstream in(jsonl);
    if (!in) throw ConfigError("cannot open manifest " + jsonl.string());
    JobManifest m;
    m.base_dir = jsonl.parent_path();
    std::set<std::string> seen;
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
        ++lineno;
        if (trim_copy(line).empty()) continue;
        const std::string where = jsonl.string() + ":" + std::to_string(lineno) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.video_id = j.at("video_id").get<std::string>();
            e.frame_source = j.value("frame_source", e.video_id);
            e.fps_native = j.at("fps_native").get<double>();
            e.frame_count = j.at("frame_count").get<std::int64_t>();
            if (j.contains("metadata")) {
                if (j["metadata"].is_string()) {
                    e.metadata_path = fs::path(j["metadata"].get<std::string>());
                } else if (j["metadata"].is_object()) {
                    e.metadata = metadata_from_json(j["metadata"]);
                }
            }
            if (!valid_video_id(e.video_id)) throw ConfigError("invalid video_id '" + e.video_id + "'");
            if (!(e.fps_native > 0)) throw ConfigError("fps_native must be positive");
            if (e.frame_count < 1) throw ConfigError("frame_count must be >= 1");
            if (!seen.insert(e.video_id).second) throw ConfigError("duplicate video_id " + e.video_id);
            m.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError(where + ex.what());
        } catch (const ConfigError& ex) {
            throw ConfigError(where + ex.what());
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

nlohmann::json parse_toml_value(std::string_view v, const std::string& where);

std::vector<std::string> split_array_items(std::string_view body, const std::string& where) {
    std::vector<std::string> items;
    std::string cur;
    bool in_str = false;
    char quote = 0;
    for (std::size_t i = 0; i < body.size(); ++i) {
        const char c = body[i];
        if (in_str) {
            cur += c;
            if (c == '\\' && quote == '"' && i + 1 < body.size()) {
                cur += body[++i];
            } else if (c == quote) {
                in_str = false;
            }
        } else if (c == '"' || c == '\'') {
            in_str = true;
            quote = c;
            cur += c;
        } else if (c == '[' || c == ']') {
            throw ConfigError(where + "nested arrays are not supported");
        } else if (c == ',') {
            items.push_back(trim_copy(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (in_str) throw ConfigError(where + "unterminated string in array");
    if (!trim_copy(cur).empty()) items.push_back(trim_copy(cur));
    return items;
}

nlohmann::json parse_toml_value(std::string_view v, const std::string& where) {
    if (v.empty()) throw ConfigError(where + "missing value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') throw ConfigError(where + "unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < v.size(); ++i) {
            char c = v[i];
            if (c == '\\') {
                if (i + 2 >= v.size()) throw ConfigError(where + "dangling escape");
                switch (v[++i]) {
                    case 'n':
                        out += '\n';
                        break;
                    case 't':
                        out += '\t';
                        break;
                    case 'r':
                        out += '\r';
                        break;
                    case '"':
                        out += '"';
                        break;
                    case '\\':
                        out += '\\';
                        break;
                    default:
                        throw ConfigError(where + "unsupported escape");
                }
            } else {
                out += c;
            }
        }
        return out;
    }
    if (v.front() == '\'') {
        if (v.size() < 2 || v.back() != '\'') throw ConfigError(where + "unterminated literal string");
        return std::string(v.substr(1, v.size() - 2));
    }
    if (v.front() == '[') {
        if (v.back() != ']') throw ConfigError(where + "unterminated array");
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& item : split_array_items(v.substr(1, v.size() - 2), where)) {
            arr.push_back(parse_toml_value(item, where));
        }
        return arr;
    }
    if (v == "true") return true;
    if (v == "false") return false;

    std::string digits;
    for (char c : v) {
        if (c != '_') digits += c;
    }
    const bool integral = digits.find_first_of(".eE") == std::string::npos && digits.find("inf") == std::string::npos &&
                          digits.find("nan") == std::string::npos;
    if (integral) {
        std::int64_t out = 0;
        const char* b = digits.data() + (digits.front() == '+' ? 1 : 0);
        auto [ptr, ec] = std::from_chars(b, digits.data() + digits.size(), out);
        if (ec == std::errc{} && ptr == digits.data() + digits.size()) return out;
    } else {
        double out = 0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
        if (ec == std::errc{} && ptr == digits.data() + digits.size()) return out;
    }
    throw ConfigError(where + "cannot parse value '" + std::string(v) + "'");
}

std::string strip_comment(std::string_view line) {
    bool in_str = false;
    char quote = 0;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (in_str) {
            if (c == '\\' && quote == '"') {
                ++i;
            } else if (c == quote) {
                in_str = false;
            }
        } else if (c == '"' || c == '\'') {
            in_str = true;
            quote = c;
        } else if (c == '#') {
            return std::string(line.substr(0, i));
        }
    }
    return std::string(line);
}

class TableBinder {
public:
    using Setter = std::function<void(const nlohmann::json&)>;

    void bind(std::string table, std::string key, Setter fn) {
        setters_[{std::move(table), std::move(key)}] = std::move(fn);
    }

    void apply(const nlohmann::json& doc) const {
        for (const auto& [table, entries] : doc.items()) {
            for (const auto& [key, value] : entries.items()) {
                auto it = setters_.find({table, key});
                if (it == setters_.end()) throw ConfigError("unknown config key [" + table + "] " + key);
                try {
                    it->second(value);
                } catch (const nlohmann::json::exception& e) {
                    throw ConfigError("bad value for [" + table + "] " + key + ": " + e.what());
                } catch (const std::invalid_argument& e) {
                    throw ConfigError("bad value for [" + table + "] " + key + ": " + e.what());
                }
            }
        }
    }

private:
    std::map<std::pair<std::string, std::string>, Setter> setters_;
};

template <class T>
TableBinder::Setter assign(T& dst) {
    return [&dst](const nlohmann::json& v) { dst = v.get<T>(); };
}

}  // namespace

nlohmann::json parse_toml_subset(std::string_view text) {
    nlohmann::json doc = nlohmann::json::object();
    std::string table;  // keys before any header land in [""]
    std::istringstream in{std::string(text)};
    std::size_t lineno = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++lineno;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        const std::string line = trim_copy(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw ConfigError(where + "malformed table header");
            table = trim_copy(std::string_view(line).substr(1, line.size() - 2));
            if (!doc.contains(table)) doc[table] = nlohmann::json::object();
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        const std::string key = trim_copy(std::string_view(line).substr(0, eq));
        if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) {
                return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
            })) {
            throw ConfigError(where + "invalid key '" + key + "'");
        }
        auto& t = doc[table];
        if (t.contains(key)) throw ConfigError(where + "duplicate key " + key);
        t[key] = parse_toml_value(trim_copy(std::string_view(line).substr(eq + 1)), where);
    }
    return doc;
}

void PipelineConfig::validate() const {
    sampling.validate();
    if (!(thresholds.caption_s >= 0) || !(thresholds.annotation_s >= 0)) throw ConfigError("thresholds must be >= 0");
    if (caption.max_tokens < 1) throw ConfigError("caption max_tokens must be >= 1");
    if (caption.video_frames < 2) throw ConfigError("caption video_frames must be >= 2");
    if (aggregator.rounds < 1) throw ConfigError("aggregate rounds must be >= 1");
    if (aggregator.max_tokens < 1) throw ConfigError("aggregate max_tokens must be >= 1");
    if (aggregator.parse_retries < 0) throw ConfigError("aggregate parse_retries must be >= 0");
    if (max_attempts_per_stage < 1) throw ConfigError("max_attempts_per_stage must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (backend.max_attempts < 1) throw ConfigError("backend max_attempts must be >= 1");
}

PipelineConfig PipelineConfig::from_toml(std::string_view text) {
    PipelineConfig c;
    std::string first_effort(to_string(c.aggregator.first_round_effort));
    std::string refine_effort(to_string(c.aggregator.refine_effort));
    std::string shard;
    std::string url;

    TableBinder b;
    b.bind("sampling", "subsample_stride", assign(c.sampling.subsample_stride));
    b.bind("sampling", "window_len", assign(c.sampling.window_len));
    b.bind("sampling", "window_stride", assign(c.sampling.window_stride));
    b.bind("sampling", "fps_native", assign(c.sampling.fps_native));
    b.bind("thresholds", "caption_s", assign(c.thresholds.caption_s));
    b.bind("thresholds", "annotation_s", assign(c.thresholds.annotation_s));
    b.bind("caption", "image_prompt", assign(c.caption.image_prompt));
    b.bind("caption", "video_prompt", assign(c.caption.video_prompt));
    b.bind("caption", "max_tokens", assign(c.caption.max_tokens));
    b.bind("caption", "video_frames", assign(c.caption.video_frames));
    b.bind("caption", "video_resolution", assign(c.caption.video_resolution));
    b.bind("caption", "max_concurrency", assign(c.caption.max_concurrency));
    b.bind("aggregate", "rounds", assign(c.aggregator.rounds));
    b.bind("aggregate", "global_depth", assign(c.aggregator.global_depth));
    b.bind("aggregate", "current_depth", assign(c.aggregator.current_depth));
    b.bind("aggregate", "first_round_effort", assign(first_effort));
    b.bind("aggregate", "refine_effort", assign(refine_effort));
    b.bind("aggregate", "max_tokens", assign(c.aggregator.max_tokens));
    b.bind("aggregate", "parse_retries", assign(c.aggregator.parse_retries));
    b.bind("aggregate", "asr_char_budget", assign(c.aggregator.asr_char_budget));
    b.bind("aggregate", "max_concurrency", assign(c.aggregator.max_concurrency));
    b.bind("backend", "url", assign(url));
    b.bind("backend", "mock_dim", assign(c.backend.mock.embed_dim));
    b.bind("backend", "mock_seed", assign(c.backend.mock.seed));
    b.bind("backend", "max_attempts", assign(c.backend.max_attempts));
    b.bind("backend", "initial_backoff_ms", assign(c.backend.initial_backoff_ms));
    b.bind("backend", "timeout_s", assign(c.backend.timeout_s));
    b.bind("backend", "max_in_flight", assign(c.backend.max_in_flight));
    b.bind("run", "seed", assign(c.seed));
    b.bind("run", "shard", assign(shard));
    b.bind("run", "max_attempts_per_stage", assign(c.max_attempts_per_stage));
    b.bind("run", "workers", assign(c.workers));
    b.bind("run", "embed_concurrency", assign(c.embed_concurrency));
    b.apply(parse_toml_subset(text));

    try {
        c.aggregator.first_round_effort = reasoning_effort_from_string(first_effort);
        c.aggregator.refine_effort = reasoning_effort_from_string(refine_effort);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!shard.empty()) c.shard = ShardSpec::parse(shard);
    if (!url.empty()) c.backend.url = url;
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) { return from_toml(read_file(path)); }

// ---------------------------------------------------------------------------
// Storage

fs::path ArtifactPaths::embeddings(std::string_view vid) const {
    return embeddings_dir() / (std::string(vid) + ".json");
}
fs::path ArtifactPaths::tree(std::string_view vid) const { return trees_dir() / (std::string(vid) + ".json"); }
fs::path ArtifactPaths::captions(std::string_view vid) const { return captions_dir() / (std::string(vid) + ".jsonl"); }
fs::path ArtifactPaths::captions_partial(std::string_view vid) const {
    return captions_dir() / (std::string(vid) + ".partial");
}
fs::path ArtifactPaths::annotations(std::string_view vid) const {
    return annotations_dir() / (std::string(vid) + ".jsonl");
}
fs::path ArtifactPaths::annotations_partial(std::string_view vid) const {
    return annotations_dir() / (std::string(vid) + ".partial");
}
fs::path ArtifactPaths::status(std::string_view vid) const { return status_dir() / (std::string(vid) + ".json"); }

void write_file_atomic(const fs::path& path, std::string_view content) {
    static std::atomic<std::uint64_t> counter{0};
    std::error_code ec;
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path(), ec);
    if (ec) throw StorageError("cannot create " + path.parent_path().string() + ": " + ec.message());

    std::ostringstream suffix;
    suffix << ".tmp-" << std::hash<std::thread::id>{}(std::this_thread::get_id()) << '-' << counter.fetch_add(1);
    const fs::path tmp = path.string() + suffix.str();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw StorageError("short write to " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw StorageError("cannot rename into " + path.string() + ": " + ec.message());
    }
}

namespace {

// Append-only JSONL log of per-node results used to resume an interrupted
// stage. A torn final line is ignored on load.
class CheckpointLog {
public:
    explicit CheckpointLog(fs::path path) : path_(std::move(path)) {}

    std::vector<nlohmann::json> load() const {
        std::vector<nlohmann::json> out;
        std::ifstream in(path_);
        for (std::string line; std::getline(in, line);) {
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.is_object()) out.push_back(std::move(j));
        }
        return out;
    }

    void append(const nlohmann::json& j) {
        std::lock_guard lock(mu_);
        if (!out_.is_open()) {
            fs::create_directories(path_.parent_path());
            out_.open(path_, std::ios::app);
            if (!out_) throw StorageError("cannot open checkpoint " + path_.string());
        }
        out_ << j.dump() << '\n';
        out_.flush();
    }

    void remove() {
        std::lock_guard lock(mu_);
        if (out_.is_open()) out_.close();
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
    std::mutex mu_;
    std::ofstream out_;
};

nlohmann::json load_json_file(const fs::path& p) {
    const std::string text = read_file(p);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaViolation(p.string() + ": " + e.what());
    }
}

std::vector<nlohmann::json> load_jsonl_file(const fs::path& p) {
    std::vector<nlohmann::json> out;
    std::ifstream in(p);
    if (!in) return out;
    for (std::string line; std::getline(in, line);) {
        if (trim_copy(line).empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaViolation(p.string() + ": " + e.what());
        }
    }
    return out;
}

std::optional<VideoMetadata> resolve_metadata(const ManifestEntry& e, const fs::path& base_dir) {
    if (e.metadata) {
        VideoMetadata m = *e.metadata;
        if (m.video_id.empty()) m.video_id = e.video_id;
        return m;
    }
    if (!e.metadata_path) return std::nullopt;
    const fs::path p = e.metadata_path->is_absolute() ? *e.metadata_path : base_dir / *e.metadata_path;
    VideoMetadata m = metadata_from_json(load_json_file(p));
    if (m.video_id.empty()) m.video_id = e.video_id;
    return m;
}

struct VideoContext {
    const ManifestEntry& entry;
    const JobManifest& manifest;
    const PipelineConfig& config;
    const ArtifactPaths& paths;
    Backend& backend;

    SamplingConfig sampling() const {
        SamplingConfig s = config.sampling;
        s.fps_native = entry.fps_native;
        return s;
    }
};

void run_embed(const VideoContext& ctx) {
    const VideoSource src{ctx.entry.video_id, ctx.entry.frame_source, ctx.entry.frame_count};
    const FrameEmbeddingSequence seq = embed_video(src, ctx.sampling(), ctx.backend, ctx.config.embed_concurrency);
    write_file_atomic(ctx.paths.embeddings(ctx.entry.video_id), to_json(seq).dump() + "\n");
}

void run_segment(const VideoContext& ctx) {
    const FrameEmbeddingSequence seq = sequence_from_json(load_json_file(ctx.paths.embeddings(ctx.entry.video_id)));
    SegmentTree tree = mark_eligibility(build_tree(seq), ctx.config.thresholds);
    write_file_atomic(ctx.paths.tree(ctx.entry.video_id), to_json(tree, ctx.config.thresholds).dump() + "\n");
}

SegmentTree load_tree(const VideoContext& ctx) {
    return tree_from_json(load_json_file(ctx.paths.tree(ctx.entry.video_id)));
}

std::map<NodeId, CaptionNode> load_captions(const fs::path& p) {
    std::map<NodeId, CaptionNode> out;
    for (const auto& j : load_jsonl_file(p)) {
        CaptionNode c = caption_from_json(j);
        out.emplace(c.node_id, std::move(c));
    }
    return out;
}

void run_caption(const VideoContext& ctx) {
    const std::string& vid = ctx.entry.video_id;
    const SegmentTree tree = load_tree(ctx);

    CheckpointLog log(ctx.paths.captions_partial(vid));
    CaptionHooks hooks;
    if (fs::exists(ctx.paths.captions(vid))) hooks.existing = load_captions(ctx.paths.captions(vid));
    for (const auto& j : log.load()) {
        try {
            CaptionNode c = caption_from_json(j);
            if (tree.contains(c.node_id) && tree.node(c.node_id).caption_eligible) hooks.existing.emplace(c.node_id, c);
        } catch (const std::exception&) {
            // A torn or stale checkpoint line; the node is simply re-captioned.
        }
    }
    hooks.on_caption = [&](const CaptionNode& c) { log.append(to_json(c, vid)); };

    const TreeOfCaptions toc = caption_all(tree, {ctx.entry.frame_source, ctx.entry.fps_native}, ctx.backend,
                                           ctx.config.caption, std::move(hooks));
    if (!toc.complete()) {
        throw TransportError(std::to_string(toc.missing.size()) + " node(s) missing captions, first: node " +
                             std::to_string(toc.missing.front().node_id) + ": " + toc.missing.front().reason);
    }
    std::string body;
    for (const auto& [id, c] : toc.captions) body += to_json(c, vid).dump() + "\n";
    write_file_atomic(ctx.paths.captions(vid), body);
    log.remove();
}

void run_aggregate(const VideoContext& ctx) {
    const std::string& vid = ctx.entry.video_id;
    TreeOfCaptions toc;
    toc.tree = load_tree(ctx);
    toc.captions = load_captions(ctx.paths.captions(vid));

    CheckpointLog log(ctx.paths.annotations_partial(vid));
    AnnotationHooks hooks;
    if (fs::exists(ctx.paths.annotations(vid))) {
        for (const auto& j : load_jsonl_file(ctx.paths.annotations(vid))) {
            AnnotationRecord r = annotation_from_json(j);
            hooks.existing.emplace(r.node_id, std::move(r));
        }
    }
    for (const auto& j : log.load()) {
        try {
            AnnotationRecord r = annotation_from_json(j);
            hooks.existing.emplace(r.node_id, std::move(r));
        } catch (const std::exception&) {}
    }
    hooks.on_record = [&](const AnnotationRecord& r) { log.append(to_json(r)); };

    const AnnotationResult result = annotate_video(toc, resolve_metadata(ctx.entry, ctx.manifest.base_dir), ctx.backend,
                                                   ctx.config.aggregator, std::move(hooks));
    if (!result.failures.empty()) {
        throw SchemaViolation(std::to_string(result.failures.size()) + " node(s) failed aggregation, first: node " +
                              std::to_string(result.failures.front().node_id) + ": " + result.failures.front().reason);
    }
    std::string body;
    for (const auto& r : result.records) body += to_json(r).dump() + "\n";
    write_file_atomic(ctx.paths.annotations(vid), body);
    log.remove();
}

void run_stage(Stage s, const VideoContext& ctx) {
    switch (s) {
        case Stage::embed:
            run_embed(ctx);
            break;
        case Stage::segment:
            run_segment(ctx);
            break;
        case Stage::caption:
            run_caption(ctx);
            break;
        case Stage::aggregate:
            run_aggregate(ctx);
            break;
    }
}

VideoState load_state(const ArtifactPaths& paths, const std::string& vid) {
    const fs::path p = paths.status(vid);
    if (!fs::exists(p)) {
        VideoState s;
        s.video_id = vid;
        return s;
    }
    return video_state_from_json(load_json_file(p));
}

void save_state(const ArtifactPaths& paths, const VideoState& state) {
    write_file_atomic(paths.status(state.video_id), to_json(state).dump(2) + "\n");
}

}  // namespace

std::size_t RunSummary::work_performed() const {
    std::size_t n = failures.size();
    for (auto c : stages_run) n += c;
    return n;
}

RunSummary run(const JobManifest& manifest, const PipelineConfig& config, std::span<const Stage> stages,
               const fs::path& out_dir, Backend& backend) {
    config.validate();
    if (stages.empty()) throw ConfigError("no stages requested");
    for (std::size_t i = 1; i < stages.size(); ++i) {
        if (static_cast<int>(stages[i]) != static_cast<int>(stages[i - 1]) + 1) {
            throw ConfigError("stages must be a contiguous run in pipeline order");
        }
    }

    const ArtifactPaths paths{out_dir};
    std::vector<const ManifestEntry*> mine;
    for (const auto& e : manifest.entries) {
        if (config.shard.contains(e.video_id)) mine.push_back(&e);
    }

    RunSummary summary;
    summary.videos_in_shard = mine.size();
    std::mutex mu;

    parallel_for(mine.size(), config.workers, [&](std::size_t i) {
        const ManifestEntry& entry = *mine[i];
        const VideoContext ctx{entry, manifest, config, paths, backend};
        VideoState state = load_state(paths, entry.video_id);
        bool complete = true;

        for (Stage s : stages) {
            const StageState cur = state.at(s);
            if (cur.status == StageStatus::done) {
                std::lock_guard lock(mu);
                ++summary.already_done[static_cast<std::size_t>(s)];
                continue;
            }
            complete = false;

            std::optional<std::string> blocked;
            for (Stage prior : kAllStages) {
                if (prior == s) break;
                if (state.at(prior).status != StageStatus::done) {
                    blocked = "prerequisite stage " + std::string(to_string(prior)) + " is not done";
                    break;
                }
            }
            if (!blocked && cur.attempts >= config.max_attempts_per_stage) {
                blocked = "attempts exhausted (" + std::to_string(cur.attempts) + "): " + cur.error.value_or("");
            }
            if (blocked) {
                std::lock_guard lock(mu);
                summary.failures.push_back({entry.video_id, s, *blocked});
                break;
            }

            StageState next{StageStatus::done, cur.attempts + 1, std::nullopt};
            try {
                run_stage(s, ctx);
            } catch (const Error& e) {
                next.status = StageStatus::failed;
                next.error = e.what();
            }
            state.set(s, next);
            save_state(paths, state);

            std::lock_guard lock(mu);
            if (next.status == StageStatus::done) {
                ++summary.stages_run[static_cast<std::size_t>(s)];
                complete = true;
            } else {
                summary.failures.push_back({entry.video_id, s, *next.error});
                complete = false;
                break;
            }
        }

        if (complete) {
            std::lock_guard lock(mu);
            ++summary.videos_complete;
        }
    });

    std::sort(summary.failures.begin(), summary.failures.end(), [](const StageFailure& a, const StageFailure& b) {
        return std::tie(a.video_id, a.stage) < std::tie(b.video_id, b.stage);
    });
    return summary;
}

// ---------------------------------------------------------------------------
// Validation

std::string_view to_string(Violation::Kind k) {
    switch (k) {
        case Violation::Kind::schema:
            return "schema";
        case Violation::Kind::cross_reference:
            return "cross_reference";
        case Violation::Kind::state:
            return "state";
    }
    return "schema";
}

std::size_t ValidationReport::count(Violation::Kind k) const {
    return static_cast<std::size_t>(
        std::count_if(violations.begin(), violations.end(), [k](const Violation& v) { return v.kind == k; }));
}

nlohmann::json ValidationReport::to_json() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& v : violations) {
        list.push_back(
            {{"kind", to_string(v.kind)}, {"file", v.file.string()}, {"line", v.line}, {"message", v.message}});
    }
    return {{"ok", ok()}, {"files_checked", files_checked}, {"violations", std::move(list)}};
}

namespace {

struct TreeInfo {
    SegmentTree tree;
    EligibilityThresholds thresholds;
};

std::string stem_of(const fs::path& p) { return p.stem().string(); }

}  // namespace

ValidationReport validate(const fs::path& out_dir) {
    ValidationReport report;
    const ArtifactPaths paths{out_dir};
    auto add = [&](Violation::Kind k, const fs::path& f, std::size_t line, std::string msg) {
        report.violations.push_back({k, f, line, std::move(msg)});
    };
    auto files = [](const fs::path& dir, std::string_view ext) {
        std::vector<fs::path> out;
        if (!fs::is_directory(dir)) return out;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
        }
        std::sort(out.begin(), out.end());
        return out;
    };

    for (const auto& f : files(paths.embeddings_dir(), ".json")) {
        ++report.files_checked;
        try {
            const auto seq = sequence_from_json(load_json_file(f));
            if (seq.video_id() != stem_of(f)) add(Violation::Kind::schema, f, 0, "video_id does not match file name");
            if (seq.empty()) add(Violation::Kind::schema, f, 0, "empty embedding sequence");
        } catch (const std::exception& e) {
            add(Violation::Kind::schema, f, 0, e.what());
        }
    }

    std::map<std::string, TreeInfo> trees;
    for (const auto& f : files(paths.trees_dir(), ".json")) {
        ++report.files_checked;
        try {
            const auto j = load_json_file(f);
            TreeInfo info{tree_from_json(j), thresholds_from_json(j)};
            info.tree.validate();
            if (info.tree.video_id() != stem_of(f))
                add(Violation::Kind::schema, f, 0, "video_id does not match file name");
            for (const SegmentNode& n : info.tree.nodes()) {
                const double d = n.duration();
                const std::string where = "node " + std::to_string(n.id) + ": ";
                if (n.caption_eligible != (d > info.thresholds.caption_s)) {
                    add(Violation::Kind::schema, f, 0, where + "caption_eligible inconsistent with duration");
                }
                if (n.annotation_eligible != (d >= info.thresholds.annotation_s)) {
                    add(Violation::Kind::schema, f, 0, where + "annotation_eligible inconsistent with duration");
                }
                bool children_ineligible = true;
                if (n.children) {
                    for (NodeId c : *n.children)
                        children_ineligible = children_ineligible && !info.tree.node(c).caption_eligible;
                }
                if (n.caption_leaf != (n.caption_eligible && children_ineligible)) {
                    add(Violation::Kind::schema, f, 0, where + "caption_leaf flag inconsistent");
                }
            }
            trees.emplace(stem_of(f), std::move(info));
        } catch (const std::exception& e) {
            add(Violation::Kind::schema, f, 0, e.what());
        }
    }

    std::map<std::string, std::set<NodeId>> captioned;
    for (const auto& f : files(paths.captions_dir(), ".jsonl")) {
        ++report.files_checked;
        const std::string vid = stem_of(f);
        const TreeInfo* info = trees.contains(vid) ? &trees.at(vid) : nullptr;
        if (!info) add(Violation::Kind::cross_reference, f, 0, "no tree for video " + vid);
        std::ifstream in(f);
        std::size_t lineno = 0;
        for (std::string line; std::getline(in, line);) {
            ++lineno;
            if (trim_copy(line).empty()) continue;
            try {
                const auto j = nlohmann::json::parse(line);
                const CaptionNode c = caption_from_json(j);
                if (j.at("video_id").get<std::string>() != vid) {
                    add(Violation::Kind::schema, f, lineno, "video_id does not match file name");
                }
                if (!captioned[vid].insert(c.node_id).second) {
                    add(Violation::Kind::schema, f, lineno, "duplicate caption for node " + std::to_string(c.node_id));
                }
                const bool frame_ok =
                    c.kind == CaptionKind::frame ? c.source_frames.size() == 1 : c.source_frames.size() >= 2;
                if (!frame_ok) add(Violation::Kind::schema, f, lineno, "source_frames count does not match kind");
                if (!info) continue;
                if (!info->tree.contains(c.node_id)) {
                    add(Violation::Kind::cross_reference, f, lineno,
                        "caption references missing node " + std::to_string(c.node_id));
                    continue;
                }
                const SegmentNode& n = info->tree.node(c.node_id);
                if (!n.caption_eligible) {
                    add(Violation::Kind::cross_reference, f, lineno,
                        "caption on ineligible node " + std::to_string(n.id));
                }
                if (c.kind != caption_kind_for(n)) {
                    add(Violation::Kind::cross_reference, f, lineno,
                        "caption kind does not match the caption-leaf rule");
                }
                for (double t : c.source_frames) {
                    if (t < n.start_s - 1e-9 || t > n.end_s + 1e-9) {
                        add(Violation::Kind::cross_reference, f, lineno, "source frame outside node span");
                        break;
                    }
                }
            } catch (const std::exception& e) {
                add(Violation::Kind::schema, f, lineno, e.what());
            }
        }
    }

    for (const auto& f : files(paths.annotations_dir(), ".jsonl")) {
        ++report.files_checked;
        const std::string vid = stem_of(f);
        const TreeInfo* info = trees.contains(vid) ? &trees.at(vid) : nullptr;
        if (!info) add(Violation::Kind::cross_reference, f, 0, "no tree for video " + vid);
        std::ifstream in(f);
        std::size_t lineno = 0;
        std::set<NodeId> seen;
        for (std::string line; std::getline(in, line);) {
            ++lineno;
            if (trim_copy(line).empty()) continue;
            try {
                const auto j = nlohmann::json::parse(line);
                const AnnotationRecord r = annotation_from_json(j);
                if (r.video_id != vid) add(Violation::Kind::schema, f, lineno, "video_id does not match file name");
                if (!seen.insert(r.node_id).second) {
                    add(Violation::Kind::schema, f, lineno,
                        "duplicate annotation for node " + std::to_string(r.node_id));
                }
                const bool na = r.action_brief == kNotApplicable && r.action_detailed == kNotApplicable;
                if (na != r.na_action)
                    add(Violation::Kind::schema, f, lineno, "na_action flag inconsistent with action fields");
                if (!info) continue;
                if (!info->tree.contains(r.node_id)) {
                    add(Violation::Kind::cross_reference, f, lineno,
                        "annotation references missing node " + std::to_string(r.node_id));
                    continue;
                }
                const SegmentNode& n = info->tree.node(r.node_id);
                if (!n.annotation_eligible) {
                    add(Violation::Kind::cross_reference, f, lineno,
                        "annotation on ineligible node " + std::to_string(n.id));
                }
                if (r.start_s != n.start_s || r.end_s != n.end_s) {
                    add(Violation::Kind::cross_reference, f, lineno, "annotation span does not match its node");
                }
            } catch (const std::exception& e) {
                add(Violation::Kind::schema, f, lineno, e.what());
            }
        }
    }

    for (const auto& f : files(paths.status_dir(), ".json")) {
        ++report.files_checked;
        try {
            const VideoState s = video_state_from_json(load_json_file(f));
            bool prior_done = true;
            for (Stage st : kAllStages) {
                const bool done = s.at(st).status == StageStatus::done;
                if (done && !prior_done) {
                    add(Violation::Kind::state, f, 0, std::string(to_string(st)) + " done before an earlier stage");
                }
                prior_done = prior_done && done;
            }
            const std::string& vid = s.video_id;
            if (s.at(Stage::embed).status == StageStatus::done && !fs::exists(paths.embeddings(vid))) {
                add(Violation::Kind::state, f, 0, "embed marked done but the artifact is missing");
            }
            if (s.at(Stage::segment).status == StageStatus::done && !trees.contains(vid)) {
                add(Violation::Kind::state, f, 0, "segment marked done but the tree is missing or invalid");
            }
            if (s.at(Stage::caption).status == StageStatus::done && trees.contains(vid)) {
                for (const SegmentNode& n : trees.at(vid).tree.nodes()) {
                    if (n.caption_eligible && !captioned[vid].contains(n.id)) {
                        add(Violation::Kind::cross_reference, f, 0,
                            "caption marked done but node " + std::to_string(n.id) + " has no caption");
                        break;
                    }
                }
            }
            if (s.at(Stage::aggregate).status == StageStatus::done && !fs::exists(paths.annotations(vid))) {
                add(Violation::Kind::state, f, 0, "aggregate marked done but the artifact is missing");
            }
        } catch (const std::exception& e) {
            add(Violation::Kind::schema, f, 0, e.what());
        }
    }
    return report;
}

}  // namespace captree
