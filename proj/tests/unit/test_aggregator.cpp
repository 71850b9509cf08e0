#include <catch_amalgamated.hpp>

#include <atomic>
#include <mutex>

#include "captree/aggregator.hpp"
#include "captree/error.hpp"
#include "captree/resources.hpp"
#include "fixtures.hpp"

using namespace captree;
using captree_test::fixture_meta;
using captree_test::fixture_toc;

namespace {

std::string valid_json(const std::string& brief) {
    return nlohmann::json{{"summary", {{"brief", "A scene."}, {"detailed", "A longer scene."}}},
                          {"action", {{"brief", brief}, {"detailed", brief + " slowly."}, {"actor", "A person."}}}}
        .dump();
}

}  // namespace

TEST_CASE("serialize_dfs: single node", "[aggregator]") {
    TreeOfCaptions toc;
    toc.tree = captree_test::span_tree({0.0, 5.0, {}});
    toc.captions[0] = {0, CaptionKind::frame, "A hand stirs.", {2.5}};
    CHECK(serialize_dfs(toc, 0, 2) == "# [0.0s \xE2\x80\x93 5.0s]\nA hand stirs.\n");
}

TEST_CASE("serialize_dfs: pre-order, depth cut and skipped nodes", "[aggregator]") {
    const auto toc = fixture_toc();
    const std::string full = serialize_dfs(toc, 0, -1);
    const auto pos = [&](const std::string& needle) { return full.find(needle); };
    CHECK(pos("# [0.0s") == 0);
    CHECK(pos("\n\n## [0.0s \xE2\x80\x93 5.0s]") != std::string::npos);
    CHECK(pos("### [0.4s") != std::string::npos);
    CHECK(pos("[0.0s \xE2\x80\x93 0.4s]") == std::string::npos);  // uncaptioned
    CHECK(pos("measures") < pos("saw cuts"));
    CHECK(pos("saw cuts") < pos("nails the panels"));
    CHECK(pos("right angle") < pos("hammer"));

    const std::string shallow = serialize_dfs(toc, 0, 1);
    CHECK(shallow.find("###") == std::string::npos);
    CHECK(shallow.find("nails the panels") != std::string::npos);

    // Depth is relative to the subtree root.
    CHECK(serialize_dfs(toc, 4, -1).rfind("# [5.0s", 0) == 0);
}

TEST_CASE("build_prompt: golden rendering", "[aggregator][golden]") {
    const auto toc = fixture_toc();
    const auto meta = fixture_meta();
    const std::string prompt = build_prompt(make_prompt_context(toc, 4, meta, AggregatorOptions{}));
    const std::string golden =
        captree_test::read_text(std::string(CAPTREE_GOLDEN_DIR) + "/aggregation_prompt_fixture.txt");
    CHECK(prompt == golden);
    CHECK(prompt.find("from 5.0 to 12.0 seconds") != std::string::npos);
}

TEST_CASE("build_prompt: substitutions and missing metadata", "[aggregator]") {
    PromptContext ctx;
    ctx.current_md = "# [12.0s \xE2\x80\x93 20.0s]\nX\n";
    ctx.global_md = ctx.current_md;
    ctx.start_time = 12.0;
    ctx.end_time = 20.0;
    ctx.global_end_time = 30.0;
    ctx.metadata_block = format_metadata(std::nullopt, 100);
    CHECK(ctx.metadata_block == "N/A");
    const std::string p = build_prompt(ctx);
    CHECK(p.find("from 12.0 to 20.0 seconds") != std::string::npos);
    CHECK(p.find("# Video metadata\n\nN/A\n") != std::string::npos);
    CHECK(p.find('{' + std::string("start_time}")) == std::string::npos);
}

TEST_CASE("render_template: unknown placeholder", "[aggregator]") {
    CHECK_THROWS_AS(render_template("hello {name}", {}), MissingPlaceholder);
    CHECK(render_template("{\"a\": 1} {x}", {{"x", "y"}}) == "{\"a\": 1} y");
}

TEST_CASE("format_metadata: absent fields and transcript budget", "[aggregator]") {
    VideoMetadata m;
    m.title = "T";
    CHECK(format_metadata(m, 10) == "Title: T\nDescription: N/A\nASR transcript: N/A\nDuration: N/A");
    m.asr_transcript = "0123456789abcdef";
    bool truncated = false;
    CHECK(format_metadata(m, 10, &truncated).find("ASR transcript: 0123456789 [...]\n") != std::string::npos);
    CHECK(truncated);
    // Multi-byte characters are never split.
    m.asr_transcript = "\xC3\xA9\xC3\xA9\xC3\xA9";
    CHECK(format_metadata(m, 2, &truncated).find("ASR transcript: \xC3\xA9\xC3\xA9 [...]") != std::string::npos);
}

TEST_CASE("build_refine_prompt: draft then verbatim instruction", "[aggregator]") {
    const std::string p = build_refine_prompt("ORIGINAL\n", "DRAFT");
    CHECK(p == "ORIGINAL\n\n# Previous draft\n\nDRAFT\n\n" + std::string(resources::refine_instruction()));
    CHECK(resources::refine_instruction().starts_with("Now, carefully analyze, verify, and revise the previous draft"));
}

TEST_CASE("response schema and checker", "[aggregator]") {
    const auto& s = response_schema();
    CHECK(s["required"] == nlohmann::json::array({"summary", "action"}));
    CHECK(s["properties"]["action"]["required"] == nlohmann::json::array({"brief", "detailed", "actor"}));

    auto good = nlohmann::json::parse(valid_json("Cut the board"));
    CHECK_FALSE(check_response_schema(good));
    auto no_summary = good;
    no_summary.erase("summary");
    CHECK(check_response_schema(no_summary));
    auto empty = good;
    empty["action"]["actor"] = " ";
    CHECK(check_response_schema(empty));
}

TEST_CASE("extract_response_json: reasoning then fenced JSON", "[aggregator]") {
    const std::string text = "Reasoning: {not json} and {\"x\": 1}\n\n```json\n" + valid_json("Cut it") + "\n```\n";
    CHECK(extract_response_json(text)["action"]["brief"] == "Cut it");
    CHECK_THROWS_AS(extract_response_json("no braces here"), SchemaViolation);
}

TEST_CASE("self_refine: three rounds, each containing the previous draft", "[aggregator]") {
    MockBackend backend;
    RefineTrace trace;
    const std::string prompt = build_prompt(make_prompt_context(fixture_toc(), 4, fixture_meta(), {}));
    const auto rec = self_refine(prompt, backend, {}, &trace);
    CHECK(backend.call_counts()[RequestKind::complete] == 3);
    REQUIRE(trace.prompts.size() == 3);
    CHECK(trace.prompts[0] == prompt);
    for (int k = 1; k < 3; ++k) {
        CHECK(trace.prompts[k].starts_with(prompt));
        CHECK(trace.prompts[k].find(trace.responses[k - 1]) != std::string::npos);
        CHECK(trace.prompts[k].ends_with(resources::refine_instruction()));
    }
    CHECK(rec.rounds == 3);
    CHECK(rec.completions == 3);
    CHECK_FALSE(rec.action_brief.empty());

    MockBackend again;
    CHECK(self_refine(prompt, again, {}) == rec);
}

TEST_CASE("self_refine: reasoning effort and schema in every request", "[aggregator]") {
    std::vector<CompletePayload> seen;
    captree_test::ScriptedBackend backend([&](const BackendRequest& req) {
        seen.push_back(std::get<CompletePayload>(req.payload));
        return BackendResponse{req.request_id, valid_json("Stir the soup"), 10};
    });
    self_refine("P", backend, {});
    REQUIRE(seen.size() == 3);
    for (const auto& p : seen) {
        CHECK(p.reasoning_effort == ReasoningEffort::high);
        REQUIRE(p.response_schema);
        CHECK(*p.response_schema == response_schema());
    }
}

TEST_CASE("self_refine: N/A actions are kept and flagged", "[aggregator]") {
    captree_test::ScriptedBackend backend([](const BackendRequest& req) {
        const auto body = nlohmann::json{{"summary", {{"brief", "A title card."}, {"detailed", "Only text."}}},
                                         {"action", {{"brief", "N/A"}, {"detailed", "N/A"}, {"actor", "N/A"}}}};
        return BackendResponse{req.request_id, body.dump(), 5};
    });
    const auto rec = self_refine("P", backend, {});
    CHECK(rec.na_action);
    CHECK(rec.action_brief == "N/A");
}

TEST_CASE("self_refine: a bad round is retried once, then fails", "[aggregator]") {
    SECTION("recovers on retry") {
        std::atomic<int> calls{0};
        captree_test::ScriptedBackend backend([&](const BackendRequest& req) {
            const int n = calls++;
            return BackendResponse{req.request_id, n == 1 ? std::string("{\"action\": {}}") : valid_json("Cut"), 1};
        });
        const auto rec = self_refine("P", backend, {});
        CHECK(calls == 4);
        CHECK(rec.completions == 4);
    }
    SECTION("missing summary twice") {
        std::atomic<int> calls{0};
        captree_test::ScriptedBackend backend([&](const BackendRequest& req) {
            ++calls;
            auto j = nlohmann::json::parse(valid_json("Cut"));
            j.erase("summary");
            return BackendResponse{req.request_id, j.dump(), 1};
        });
        CHECK_THROWS_AS(self_refine("P", backend, {}), SchemaViolation);
        CHECK(calls == 2);
    }
}

TEST_CASE("self_refine: -ing briefs only warn", "[aggregator]") {
    captree_test::ScriptedBackend backend(
        [](const BackendRequest& req) { return BackendResponse{req.request_id, valid_json("Cutting the board"), 1}; });
    const auto rec = self_refine("P", backend, {});
    CHECK(rec.action_brief == "Cutting the board");
    CHECK(rec.warnings.size() == 1);
}

TEST_CASE("annotate_video: four-second filter and partial results", "[aggregator]") {
    const auto toc = fixture_toc();
    SECTION("eligible nodes only") {
        MockBackend backend;
        const auto res = annotate_video(toc, fixture_meta(), backend);
        std::vector<NodeId> ids;
        for (const auto& r : res.records) ids.push_back(r.node_id);
        CHECK(ids == std::vector<NodeId>{0, 1, 3, 4, 6});
        CHECK(res.failures.empty());
        CHECK(backend.call_counts()[RequestKind::complete] == 15);
        for (const auto& r : res.records) {
            CHECK(r.video_id == "birdhouse");
            CHECK(r.start_s == toc.tree.node(r.node_id).start_s);
            CHECK_FALSE(check_response_schema(to_json(r)));
        }
    }
    SECTION("one node failing leaves the others") {
        MockBackend mock;
        captree_test::ScriptedBackend backend([&](const BackendRequest& req) -> BackendResponse {
            if (req.request_id.starts_with("birdhouse/aggregate/3/")) {
                return BackendResponse{req.request_id, std::string("no json"), 1};
            }
            return mock.call(req);
        });
        const auto res = annotate_video(toc, fixture_meta(), backend);
        CHECK(res.records.size() == 4);
        REQUIRE(res.failures.size() == 1);
        CHECK(res.failures[0].node_id == 3);
    }
    SECTION("nothing eligible") {
        TreeOfCaptions small;
        small.tree = captree_test::span_tree({0.0, 2.0, {}});
        small.captions[0] = {0, CaptionKind::frame, "x", {1.0}};
        MockBackend backend;
        const auto res = annotate_video(small, std::nullopt, backend);
        CHECK(res.records.empty());
        CHECK(res.failures.empty());
    }
    SECTION("order of processing does not matter") {
        MockBackend a;
        MockBackend b;
        AggregatorOptions serial;
        serial.max_concurrency = 1;
        AggregatorOptions wide;
        wide.max_concurrency = 8;
        CHECK(annotate_video(toc, fixture_meta(), a, serial).records ==
              annotate_video(toc, fixture_meta(), b, wide).records);
    }
}

TEST_CASE("annotation JSON round trip", "[aggregator]") {
    auto rec = captree_test::make_record("v", 3, 1.0, 6.5, "Cut the board");
    rec.asr_truncated = true;
    const auto j = nlohmann::json::parse(to_json(rec).dump());
    CHECK(j["provenance"]["prompt_template"] == "aggregation_prompt_v1");
    CHECK(annotation_from_json(j) == rec);
}
