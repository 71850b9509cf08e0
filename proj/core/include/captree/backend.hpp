#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace captree {

using Json = nlohmann::json;

enum class RequestKind { embed_window, caption_image, caption_video, complete, embed_text };
inline constexpr std::size_t kRequestKindCount = 5;

std::string_view to_string(RequestKind kind);
RequestKind request_kind_from_string(std::string_view name);

enum class ReasoningEffort { low, medium, high };

std::string_view to_string(ReasoningEffort effort);
ReasoningEffort reasoning_effort_from_string(std::string_view name);

// A reference to a single decoded frame. The backend resolves it; the
// pipeline never touches pixels.
struct FrameRef {
    std::string source;     // opaque frame source (path, URI, ...)
    std::int64_t index{0};  // raw (native-rate) frame index
    double time_s{0.0};
    int resolution{0};  // requested square side in pixels, 0 = native

    friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

struct EmbedWindowPayload {
    std::vector<FrameRef> frames;
};

struct CaptionImagePayload {
    FrameRef image;
    std::string prompt;
    int max_tokens{1024};
};

struct CaptionVideoPayload {
    std::vector<FrameRef> frames;
    std::string prompt;
    int max_tokens{1024};
};

struct CompletePayload {
    std::string prompt;
    int max_tokens{4096};
    ReasoningEffort reasoning_effort{ReasoningEffort::high};
    std::optional<Json> response_schema;
};

struct EmbedTextPayload {
    std::string text;
};

using RequestPayload =
    std::variant<EmbedWindowPayload, CaptionImagePayload, CaptionVideoPayload, CompletePayload, EmbedTextPayload>;

struct BackendRequest {
    std::string request_id;
    RequestPayload payload;

    RequestKind kind() const noexcept { return static_cast<RequestKind>(payload.index()); }

    // Throws std::invalid_argument when a field the kind requires is absent.
    void validate() const;
};

using FloatVector = std::vector<float>;
using FloatMatrix = std::vector<FloatVector>;

struct BackendResponse {
    std::string request_id;
    std::variant<std::string, FloatVector, FloatMatrix> result;
    std::int64_t token_count{0};

    // Typed accessors; a mismatched shape is a MalformedResponse.
    const std::string& text() const;
    const FloatVector& vector() const;
    const FloatMatrix& matrix() const;

    friend bool operator==(const BackendResponse&, const BackendResponse&) = default;
};

// Wire encoding shared by the HTTP client, the test servers and any
// out-of-process adapter.
namespace wire {

// Endpoint path for a kind, e.g. "/embed_window".
std::string endpoint(RequestKind kind);

Json encode_request(const BackendRequest& req);
BackendRequest decode_request(RequestKind kind, const Json& body);

Json encode_response(RequestKind kind, const BackendResponse& resp);

// Validates the body against the response shape for `kind`. `expected_rows`
// applies to embed_window (one vector per requested frame); `expected_dim`
// of 0 disables the dimension check. Throws MalformedResponse.
BackendResponse decode_response(RequestKind kind, std::string request_id, const Json& body,
                                std::size_t expected_rows = 0, std::size_t expected_dim = 0);

}  // namespace wire

struct BackendCallCounts {
    std::array<std::int64_t, kRequestKindCount> by_kind{};

    std::int64_t operator[](RequestKind kind) const { return by_kind[static_cast<std::size_t>(kind)]; }
    std::int64_t total() const;
};

// Single entry point for all model inference. Implementations must be safe
// to call concurrently.
class Backend {
public:
    virtual ~Backend() = default;

    BackendResponse call(const BackendRequest& req);

    BackendCallCounts call_counts() const;
    void reset_call_counts();

    virtual std::string describe() const = 0;

protected:
    virtual BackendResponse do_call(const BackendRequest& req) = 0;

private:
    std::array<std::atomic<std::int64_t>, kRequestKindCount> counts_{};
};

struct MockBackendOptions {
    std::size_t embed_dim{16};
    std::uint64_t seed{0};
    // Roughly one completion in na_period answers with "N/A" actions.
    std::uint64_t na_period{31};
};

// Offline backend. Every response is a pure function of (options, request):
// the same request always yields a byte-identical response.
class MockBackend final : public Backend {
public:
    explicit MockBackend(MockBackendOptions opts = {});

    std::string describe() const override;
    const MockBackendOptions& options() const noexcept { return opts_; }

protected:
    BackendResponse do_call(const BackendRequest& req) override;

private:
    MockBackendOptions opts_;
};

struct HttpBackendOptions {
    std::string base_url;
    int max_attempts{3};
    int initial_backoff_ms{200};
    double backoff_multiplier{2.0};
    int timeout_s{600};
    std::size_t max_in_flight{8};
    std::size_t embed_dim{0};  // 0 = learn from the first response
};

// JSON-over-HTTP client for a remote model service. Transient failures
// (connection errors, 429, 5xx) are retried with exponential backoff.
class HttpBackend final : public Backend {
public:
    explicit HttpBackend(HttpBackendOptions opts);
    ~HttpBackend() override;

    std::string describe() const override;

protected:
    BackendResponse do_call(const BackendRequest& req) override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct BackendSettings {
    std::optional<std::string> url;  // overrides CAPTREE_BACKEND_URL when set
    MockBackendOptions mock;
    int max_attempts{3};
    int initial_backoff_ms{200};
    int timeout_s{600};
    std::size_t max_in_flight{8};
};

// Remote backend when a URL is configured or CAPTREE_BACKEND_URL is set,
// otherwise the in-process mock.
std::unique_ptr<Backend> make_backend(const BackendSettings& settings);

// Deterministic request id derived from the request content.
std::string content_request_id(std::string_view scope, const RequestPayload& payload);

}  // namespace captree
