#include "captree/backend.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <semaphore>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>

#include "captree/error.hpp"
#include "captree/hashing.hpp"

namespace captree {

namespace {

constexpr std::array<std::string_view, kRequestKindCount> kKindNames = {"embed_window", "caption_image",
                                                                        "caption_video", "complete", "embed_text"};

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Json frame_to_json(const FrameRef& f) {
    Json j = {{"source", f.source}, {"index", f.index}, {"time_s", f.time_s}};
    if (f.resolution > 0) j["resolution"] = f.resolution;
    return j;
}

FrameRef frame_from_json(const Json& j) {
    FrameRef f;
    f.source = j.at("source").get<std::string>();
    f.index = j.at("index").get<std::int64_t>();
    f.time_s = j.at("time_s").get<double>();
    f.resolution = j.value("resolution", 0);
    return f;
}

std::int64_t count_tokens(std::string_view text) {
    std::int64_t n = 0;
    bool in_token = false;
    for (char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

FloatVector parse_float_vector(const Json& j, std::string_view what) {
    if (!j.is_array()) throw MalformedResponse(std::string(what) + " is not an array");
    FloatVector v;
    v.reserve(j.size());
    for (const auto& x : j) {
        if (!x.is_number()) throw MalformedResponse(std::string(what) + " has a non-numeric entry");
        const double d = x.get<double>();
        if (!std::isfinite(d)) throw MalformedResponse(std::string(what) + " has a non-finite entry");
        v.push_back(static_cast<float>(d));
    }
    return v;
}

}  // namespace

std::string_view to_string(RequestKind kind) { return kKindNames.at(static_cast<std::size_t>(kind)); }

RequestKind request_kind_from_string(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i) {
        if (kKindNames[i] == name) return static_cast<RequestKind>(i);
    }
    throw std::invalid_argument("unknown request kind: " + std::string(name));
}

std::string_view to_string(ReasoningEffort effort) {
    switch (effort) {
        case ReasoningEffort::low:
            return "low";
        case ReasoningEffort::medium:
            return "medium";
        case ReasoningEffort::high:
            return "high";
    }
    return "high";
}

ReasoningEffort reasoning_effort_from_string(std::string_view name) {
    if (name == "low") return ReasoningEffort::low;
    if (name == "medium") return ReasoningEffort::medium;
    if (name == "high") return ReasoningEffort::high;
    throw std::invalid_argument("unknown reasoning effort: " + std::string(name));
}

void BackendRequest::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    };
    std::visit(overloaded{
                   [&](const EmbedWindowPayload& p) {
                       require(!p.frames.empty(), "embed_window requires at least one frame");
                   },
                   [&](const CaptionImagePayload& p) {
                       require(!p.image.source.empty(), "caption_image requires an image_ref");
                       require(!p.prompt.empty(), "caption_image requires a prompt");
                       require(p.max_tokens > 0, "caption_image requires max_tokens > 0");
                   },
                   [&](const CaptionVideoPayload& p) {
                       require(!p.frames.empty(), "caption_video requires frame_refs");
                       require(!p.prompt.empty(), "caption_video requires a prompt");
                       require(p.max_tokens > 0, "caption_video requires max_tokens > 0");
                   },
                   [&](const CompletePayload& p) {
                       require(!p.prompt.empty(), "complete requires a prompt");
                       require(p.max_tokens > 0, "complete requires max_tokens > 0");
                   },
                   [&](const EmbedTextPayload& p) { require(!p.text.empty(), "embed_text requires text"); },
               },
               payload);
}

const std::string& BackendResponse::text() const {
    if (const auto* s = std::get_if<std::string>(&result)) return *s;
    throw MalformedResponse("response " + request_id + " does not carry text");
}

const FloatVector& BackendResponse::vector() const {
    if (const auto* v = std::get_if<FloatVector>(&result)) return *v;
    throw MalformedResponse("response " + request_id + " does not carry a vector");
}

const FloatMatrix& BackendResponse::matrix() const {
    if (const auto* m = std::get_if<FloatMatrix>(&result)) return *m;
    throw MalformedResponse("response " + request_id + " does not carry per-frame vectors");
}

namespace wire {

std::string endpoint(RequestKind kind) { return "/" + std::string(to_string(kind)); }

Json encode_request(const BackendRequest& req) {
    Json body = std::visit(
        overloaded{
            [](const EmbedWindowPayload& p) {
                Json frames = Json::array();
                for (const auto& f : p.frames) frames.push_back(frame_to_json(f));
                return Json{{"frames", std::move(frames)}, {"count", p.frames.size()}};
            },
            [](const CaptionImagePayload& p) {
                return Json{{"image_ref", frame_to_json(p.image)}, {"prompt", p.prompt}, {"max_tokens", p.max_tokens}};
            },
            [](const CaptionVideoPayload& p) {
                Json frames = Json::array();
                for (const auto& f : p.frames) frames.push_back(frame_to_json(f));
                return Json{{"frame_refs", std::move(frames)}, {"prompt", p.prompt}, {"max_tokens", p.max_tokens}};
            },
            [](const CompletePayload& p) {
                Json j{{"prompt", p.prompt},
                       {"max_tokens", p.max_tokens},
                       {"reasoning_effort", to_string(p.reasoning_effort)}};
                if (p.response_schema) j["response_schema"] = *p.response_schema;
                return j;
            },
            [](const EmbedTextPayload& p) { return Json{{"text", p.text}}; },
        },
        req.payload);
    body["request_id"] = req.request_id;
    return body;
}

BackendRequest decode_request(RequestKind kind, const Json& body) {
    BackendRequest req;
    req.request_id = body.value("request_id", std::string{});
    switch (kind) {
        case RequestKind::embed_window: {
            EmbedWindowPayload p;
            for (const auto& f : body.at("frames")) p.frames.push_back(frame_from_json(f));
            if (body.at("count").get<std::size_t>() != p.frames.size()) {
                throw std::invalid_argument("embed_window count does not match frames");
            }
            req.payload = std::move(p);
            break;
        }
        case RequestKind::caption_image: {
            CaptionImagePayload p;
            p.image = frame_from_json(body.at("image_ref"));
            p.prompt = body.at("prompt").get<std::string>();
            p.max_tokens = body.value("max_tokens", 1024);
            req.payload = std::move(p);
            break;
        }
        case RequestKind::caption_video: {
            CaptionVideoPayload p;
            for (const auto& f : body.at("frame_refs")) p.frames.push_back(frame_from_json(f));
            p.prompt = body.at("prompt").get<std::string>();
            p.max_tokens = body.value("max_tokens", 1024);
            req.payload = std::move(p);
            break;
        }
        case RequestKind::complete: {
            CompletePayload p;
            p.prompt = body.at("prompt").get<std::string>();
            p.max_tokens = body.at("max_tokens").get<int>();
            p.reasoning_effort = reasoning_effort_from_string(body.at("reasoning_effort").get<std::string>());
            if (body.contains("response_schema")) p.response_schema = body["response_schema"];
            req.payload = std::move(p);
            break;
        }
        case RequestKind::embed_text: {
            req.payload = EmbedTextPayload{body.at("text").get<std::string>()};
            break;
        }
    }
    req.validate();
    return req;
}

Json encode_response(RequestKind kind, const BackendResponse& resp) {
    Json body{{"request_id", resp.request_id}, {"token_count", resp.token_count}};
    switch (kind) {
        case RequestKind::embed_window:
            body["vector_per_frame"] = resp.matrix();
            break;
        case RequestKind::embed_text:
            body["vector"] = resp.vector();
            break;
        default:
            body["text"] = resp.text();
            break;
    }
    return body;
}

BackendResponse decode_response(RequestKind kind, std::string request_id, const Json& body, std::size_t expected_rows,
                                std::size_t expected_dim) {
    if (!body.is_object()) throw MalformedResponse("response body is not a JSON object");
    if (body.contains("error")) {
        throw BackendRefusal(body["error"].is_string() ? body["error"].get<std::string>() : body["error"].dump());
    }
    if (body.contains("request_id")) {
        if (!body["request_id"].is_string() || body["request_id"].get<std::string>() != request_id) {
            throw MalformedResponse("response request_id does not match the request");
        }
    }

    BackendResponse resp;
    resp.request_id = std::move(request_id);
    if (body.contains("token_count")) {
        if (!body["token_count"].is_number_integer() || body["token_count"].get<std::int64_t>() < 0) {
            throw MalformedResponse("token_count must be a nonnegative integer");
        }
        resp.token_count = body["token_count"].get<std::int64_t>();
    }

    switch (kind) {
        case RequestKind::embed_window: {
            if (!body.contains("vector_per_frame")) {
                throw MalformedResponse("embed_window response lacks vector_per_frame");
            }
            const Json& rows = body["vector_per_frame"];
            if (!rows.is_array()) throw MalformedResponse("vector_per_frame is not an array");
            FloatMatrix m;
            m.reserve(rows.size());
            for (const auto& row : rows) m.push_back(parse_float_vector(row, "vector_per_frame row"));
            if (expected_rows != 0 && m.size() != expected_rows) {
                throw MalformedResponse("embed_window returned " + std::to_string(m.size()) + " vectors for " +
                                        std::to_string(expected_rows) + " frames");
            }
            if (m.empty()) throw MalformedResponse("embed_window returned no vectors");
            const std::size_t dim = m.front().size();
            if (dim == 0) throw MalformedResponse("embed_window returned empty vectors");
            for (const auto& row : m) {
                if (row.size() != dim) throw MalformedResponse("ragged vector_per_frame");
            }
            if (expected_dim != 0 && dim != expected_dim) {
                throw MalformedResponse("embedding dimension " + std::to_string(dim) + " != configured " +
                                        std::to_string(expected_dim));
            }
            resp.result = std::move(m);
            break;
        }
        case RequestKind::embed_text: {
            if (!body.contains("vector")) throw MalformedResponse("embed_text response lacks vector");
            FloatVector v = parse_float_vector(body["vector"], "vector");
            if (v.empty()) throw MalformedResponse("embed_text returned an empty vector");
            if (expected_dim != 0 && v.size() != expected_dim) {
                throw MalformedResponse("embedding dimension " + std::to_string(v.size()) + " != configured " +
                                        std::to_string(expected_dim));
            }
            resp.result = std::move(v);
            break;
        }
        default: {
            if (!body.contains("text") || !body["text"].is_string()) {
                throw MalformedResponse(std::string(to_string(kind)) + " response lacks text");
            }
            std::string text = body["text"].get<std::string>();
            if (text.empty()) throw MalformedResponse(std::string(to_string(kind)) + " returned empty text");
            resp.result = std::move(text);
            break;
        }
    }
    return resp;
}

}  // namespace wire

std::int64_t BackendCallCounts::total() const {
    std::int64_t sum = 0;
    for (auto c : by_kind) sum += c;
    return sum;
}

BackendResponse Backend::call(const BackendRequest& req) {
    req.validate();
    counts_[static_cast<std::size_t>(req.kind())].fetch_add(1, std::memory_order_relaxed);
    return do_call(req);
}

BackendCallCounts Backend::call_counts() const {
    BackendCallCounts out;
    for (std::size_t i = 0; i < kRequestKindCount; ++i) out.by_kind[i] = counts_[i].load();
    return out;
}

void Backend::reset_call_counts() {
    for (auto& c : counts_) c.store(0);
}

std::string content_request_id(std::string_view scope, const RequestPayload& payload) {
    BackendRequest probe{"", payload};
    const std::string body = wire::encode_request(probe).dump();
    std::ostringstream os;
    os << scope << '-' << std::hex << fnv1a64(body);
    return os.str();
}

// ---------------------------------------------------------------------------
// Mock backend

namespace {

constexpr std::array<std::string_view, 16> kVerbs = {"stir", "pour",   "cut",     "slice", "whisk", "mix",
                                                     "fold", "spread", "tighten", "sand",  "paint", "measure",
                                                     "wipe", "attach", "peel",    "knead"};
constexpr std::array<std::string_view, 12> kObjects = {"the batter",     "the sauce",   "the onion",  "the dough",
                                                       "the board",      "the bolt",    "the fabric", "the paint",
                                                       "the vegetables", "the bracket", "the butter", "the wood"};
constexpr std::array<std::string_view, 6> kPlaces = {"on a wooden table", "in a bright kitchen", "in a workshop",
                                                     "on a countertop",   "at a workbench",      "near a window"};
constexpr std::array<std::string_view, 5> kActors = {"A person wearing an apron", "A man in a grey shirt",
                                                     "A woman with long hair", "A pair of hands",
                                                     "A person in a workshop"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& items, std::uint64_t h) {
    return items[h % N];
}

std::string capitalized(std::string_view s) {
    std::string out(s);
    if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

std::string mock_caption(std::string_view lead, std::uint64_t h) {
    std::string text(lead);
    text += " a person who ";
    text += pick(kVerbs, h);
    text += "s ";
    text += pick(kObjects, h >> 8);
    text += ' ';
    text += pick(kPlaces, h >> 16);
    text += ". The hands move steadily and the camera stays mostly still.";
    return text;
}

std::string mock_completion(std::string_view prompt, const MockBackendOptions& opts) {
    const std::uint64_t h = mix(fnv1a64(prompt), opts.seed);
    Json summary;
    Json action;
    // The action vocabulary is keyed off the prompt's segment section so that
    // refine rounds over the same segment agree on the action.
    std::string_view anchor = prompt;
    if (auto pos = prompt.find("# Current segment to be processed"); pos != std::string_view::npos) {
        anchor = prompt.substr(pos, 512);
    }
    const std::uint64_t a = mix(fnv1a64(anchor), opts.seed);
    const std::string verb(pick(kVerbs, a));
    const std::string object(pick(kObjects, a >> 8));
    const std::string place(pick(kPlaces, a >> 16));

    summary["brief"] = "A person works " + place + ".";
    summary["detailed"] = "A person works " + place + ", preparing the materials, then they " + verb + " " + object +
                          " and check the result.";
    if (opts.na_period != 0 && a % opts.na_period == 0) {
        action["brief"] = "N/A";
        action["detailed"] = "N/A";
        action["actor"] = "N/A";
    } else {
        action["brief"] = capitalized(verb) + " " + object;
        action["detailed"] = capitalized(verb) + " " + object + " carefully " + place + ".";
        action["actor"] = std::string(pick(kActors, a >> 24)) + ".";
    }
    Json out{{"summary", summary}, {"action", action}};

    std::string text = "Reasoning: the captions agree on the main activity (draft ";
    text += std::to_string(h % 1000);
    text += ").\n\n```json\n";
    text += out.dump(2);
    text += "\n```\n";
    return text;
}

}  // namespace

MockBackend::MockBackend(MockBackendOptions opts) : opts_(opts) {
    if (opts_.embed_dim == 0) throw std::invalid_argument("mock embed_dim must be positive");
}

std::string MockBackend::describe() const {
    return "mock(dim=" + std::to_string(opts_.embed_dim) + ", seed=" + std::to_string(opts_.seed) + ")";
}

BackendResponse MockBackend::do_call(const BackendRequest& req) {
    BackendResponse resp;
    resp.request_id = req.request_id;
    const std::size_t dim = opts_.embed_dim;

    std::visit(overloaded{
                   [&](const EmbedWindowPayload& p) {
                       // Frames are grouped into coarse scenes with nested sub-scenes so
                       // the segmenter sees a genuine multi-scale structure. A small
                       // window-dependent term makes overlapping windows disagree.
                       FloatMatrix rows;
                       rows.reserve(p.frames.size());
                       const std::int64_t window_start = p.frames.front().index;
                       for (const auto& f : p.frames) {
                           const std::uint64_t src = mix(fnv1a64(f.source), opts_.seed);
                           const std::int64_t coarse_len = 90 + static_cast<std::int64_t>(src % 240);
                           const std::int64_t fine_len = std::max<std::int64_t>(12, coarse_len / 4);
                           const auto coarse = static_cast<std::uint64_t>(f.index / coarse_len);
                           const auto fine = static_cast<std::uint64_t>(f.index / fine_len);
                           FloatVector v(dim);
                           for (std::size_t d = 0; d < dim; ++d) {
                               const double base = unit_interval_signed(mix(mix(src, coarse), d + 1));
                               const double detail = unit_interval_signed(mix(mix(src ^ 0x5bd1e995ULL, fine), d + 1));
                               const double noise =
                                   unit_interval_signed(mix(mix(src, static_cast<std::uint64_t>(f.index)),
                                                            static_cast<std::uint64_t>(window_start) * 131 + d));
                               v[d] = static_cast<float>(base + 0.35 * detail + 0.05 * noise);
                           }
                           rows.push_back(std::move(v));
                       }
                       resp.result = std::move(rows);
                   },
                   [&](const CaptionImagePayload& p) {
                       const std::uint64_t h =
                           mix(mix(fnv1a64(p.image.source), opts_.seed), static_cast<std::uint64_t>(p.image.index));
                       resp.result = mock_caption("The image shows", h);
                   },
                   [&](const CaptionVideoPayload& p) {
                       std::uint64_t h = mix(fnv1a64(p.frames.front().source), opts_.seed);
                       h = mix(h, static_cast<std::uint64_t>(p.frames.front().index));
                       h = mix(h, static_cast<std::uint64_t>(p.frames.back().index));
                       resp.result = mock_caption("The video shows", h);
                   },
                   [&](const CompletePayload& p) { resp.result = mock_completion(p.prompt, opts_); },
                   [&](const EmbedTextPayload& p) {
                       const std::uint64_t h = mix(fnv1a64(p.text), opts_.seed);
                       FloatVector v(dim);
                       for (std::size_t d = 0; d < dim; ++d) {
                           v[d] = static_cast<float>(unit_interval_signed(mix(h, d + 1)));
                       }
                       resp.result = std::move(v);
                   },
               },
               req.payload);

    if (const auto* text = std::get_if<std::string>(&resp.result)) resp.token_count = count_tokens(*text);
    return resp;
}

// ---------------------------------------------------------------------------
// HTTP backend

struct HttpBackend::Impl {
    HttpBackendOptions opts;
    std::counting_semaphore<4096> in_flight;
    std::array<std::atomic<std::size_t>, kRequestKindCount> learned_dim{};

    explicit Impl(HttpBackendOptions o)
        : opts(std::move(o)),
          in_flight(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(opts.max_in_flight, 1, 4096))) {}
};

HttpBackend::HttpBackend(HttpBackendOptions opts) : impl_(std::make_unique<Impl>(std::move(opts))) {
    if (impl_->opts.base_url.empty()) throw ConfigError("HttpBackend requires a base URL");
    if (impl_->opts.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
}

HttpBackend::~HttpBackend() = default;

std::string HttpBackend::describe() const { return "http(" + impl_->opts.base_url + ")"; }

BackendResponse HttpBackend::do_call(const BackendRequest& req) {
    const RequestKind kind = req.kind();
    const std::string path = wire::endpoint(kind);
    const std::string body = wire::encode_request(req).dump();

    std::size_t expected_rows = 0;
    if (const auto* w = std::get_if<EmbedWindowPayload>(&req.payload)) expected_rows = w->frames.size();

    struct Permit {
        std::counting_semaphore<4096>& sem;
        explicit Permit(std::counting_semaphore<4096>& s) : sem(s) { sem.acquire(); }
        ~Permit() { sem.release(); }
    } permit(impl_->in_flight);

    std::string last_error = "no attempt made";
    double backoff_ms = impl_->opts.initial_backoff_ms;
    for (int attempt = 1; attempt <= impl_->opts.max_attempts; ++attempt) {
        if (attempt > 1) {
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(backoff_ms));
            backoff_ms *= impl_->opts.backoff_multiplier;
        }

        httplib::Client client(impl_->opts.base_url);
        client.set_connection_timeout(std::chrono::seconds(std::min(impl_->opts.timeout_s, 30)));
        client.set_read_timeout(std::chrono::seconds(impl_->opts.timeout_s));
        client.set_write_timeout(std::chrono::seconds(impl_->opts.timeout_s));

        auto res = client.Post(path, body, "application/json");
        if (!res) {
            last_error = "transport: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }

        Json parsed;
        try {
            parsed = Json::parse(res->body);
        } catch (const Json::parse_error& e) {
            if (res->status != 200) {
                throw BackendRefusal("HTTP " + std::to_string(res->status) + ": " + res->body);
            }
            throw MalformedResponse(std::string("unparseable response body: ") + e.what());
        }
        if (res->status != 200) {
            std::string msg = parsed.is_object() && parsed.contains("error") ? parsed["error"].dump() : res->body;
            throw BackendRefusal("HTTP " + std::to_string(res->status) + ": " + msg);
        }

        const bool is_embed = kind == RequestKind::embed_window || kind == RequestKind::embed_text;
        auto& learned = impl_->learned_dim[static_cast<std::size_t>(kind)];
        std::size_t expected_dim = impl_->opts.embed_dim != 0 ? impl_->opts.embed_dim : learned.load();
        BackendResponse resp = wire::decode_response(kind, req.request_id, parsed, expected_rows, expected_dim);
        if (is_embed && expected_dim == 0) {
            const std::size_t dim =
                kind == RequestKind::embed_text ? resp.vector().size() : resp.matrix().front().size();
            std::size_t zero = 0;
            if (!learned.compare_exchange_strong(zero, dim) && zero != dim) {
                throw MalformedResponse("embedding dimension changed within the run");
            }
        }
        return resp;
    }
    throw TransportError(path + " failed after " + std::to_string(impl_->opts.max_attempts) +
                         " attempts: " + last_error);
}

std::unique_ptr<Backend> make_backend(const BackendSettings& settings) {
    std::optional<std::string> url = settings.url;
    if (!url) {
        if (const char* env = std::getenv("CAPTREE_BACKEND_URL"); env != nullptr && *env != '\0') {
            url = env;
        }
    }
    if (!url) return std::make_unique<MockBackend>(settings.mock);

    HttpBackendOptions opts;
    opts.base_url = *url;
    opts.max_attempts = settings.max_attempts;
    opts.initial_backoff_ms = settings.initial_backoff_ms;
    opts.timeout_s = settings.timeout_s;
    opts.max_in_flight = settings.max_in_flight;
    return std::make_unique<HttpBackend>(std::move(opts));
}

}  // namespace captree
