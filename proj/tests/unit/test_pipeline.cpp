#include <catch_amalgamated.hpp>

#include <fstream>

#include "captree/error.hpp"
#include "captree/pipeline.hpp"
#include "captree/stats.hpp"
#include "fixtures.hpp"

using namespace captree;
using namespace captree_test;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> read_lines(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
    std::string body;
    for (const auto& l : lines) body += l + "\n";
    write_text(p, body);
}

std::map<std::string, std::string> artifacts_only(const fs::path& dir) {
    auto snap = snapshot(dir);
    std::erase_if(snap, [](const auto& kv) { return kv.first.starts_with("status/"); });
    return snap;
}

PipelineConfig test_config(std::size_t workers = 2) {
    PipelineConfig c;
    c.workers = workers;
    return c;
}

}  // namespace

TEST_CASE("TOML subset", "[pipeline]") {
    const auto j = parse_toml_subset(R"(
# comment
[sampling]
window_len = 64   # trailing comment
fps_native = 29.97
[caption]
image_prompt = "Describe \"this\" image."
video_prompt = 'raw \n kept'
[run]
seed = 1_000
shard = "1/4"
flags = [1, 2, "three"]
ok = true
)");
    CHECK(j["sampling"]["window_len"] == 64);
    CHECK(j["sampling"]["fps_native"] == 29.97);
    CHECK(j["caption"]["image_prompt"] == "Describe \"this\" image.");
    CHECK(j["caption"]["video_prompt"] == "raw \\n kept");
    CHECK(j["run"]["seed"] == 1000);
    CHECK(j["run"]["flags"] == nlohmann::json::array({1, 2, "three"}));
    CHECK(j["run"]["ok"] == true);

    CHECK_THROWS_AS(parse_toml_subset("[a]\nx = 1\nx = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_subset("[a\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_subset("x = \"open\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_subset("x = [[1]]\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_subset("just words\n"), ConfigError);
}

TEST_CASE("pipeline config from TOML", "[pipeline]") {
    const auto c = PipelineConfig::from_toml(R"(
[thresholds]
caption_s = 1.0
[aggregate]
rounds = 2
[backend]
mock_dim = 8
[run]
shard = "1/3"
workers = 4
)");
    CHECK(c.thresholds.caption_s == 1.0);
    CHECK(c.thresholds.annotation_s == 4.0);
    CHECK(c.aggregator.rounds == 2);
    CHECK(c.backend.mock.embed_dim == 8);
    CHECK(c.shard.index == 1);
    CHECK(c.shard.total == 3);
    CHECK(c.workers == 4);
    CHECK(c.sampling.window_len == 64);

    CHECK_THROWS_AS(PipelineConfig::from_toml("[run]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_toml("[nowhere]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_toml("[aggregate]\nrounds = 0\n"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_toml("[aggregate]\nrounds = \"three\"\n"), ConfigError);
}

TEST_CASE("shipped example config spells out the defaults", "[pipeline]") {
    const auto c = PipelineConfig::load(fs::path(CAPTREE_CONFIG_DIR) / "example.toml");
    const PipelineConfig d;
    CHECK(c.sampling.window_len == d.sampling.window_len);
    CHECK(c.thresholds == d.thresholds);
    CHECK(c.caption == d.caption);
    CHECK(c.aggregator == d.aggregator);
    CHECK(c.backend.url == std::nullopt);
    CHECK(c.backend.mock.embed_dim == d.backend.mock.embed_dim);
    CHECK(c.seed == d.seed);
    CHECK(c.workers == d.workers);
    CHECK(c.embed_concurrency == d.embed_concurrency);
}

TEST_CASE("stage lists", "[pipeline]") {
    CHECK(parse_stages("embed,segment,caption,aggregate") == std::vector<Stage>(kAllStages.begin(), kAllStages.end()));
    CHECK(parse_stages("caption") == std::vector<Stage>{Stage::caption});
    CHECK(parse_stages("segment, caption") == std::vector<Stage>{Stage::segment, Stage::caption});
    CHECK_THROWS_AS(parse_stages("embed,caption"), ConfigError);
    CHECK_THROWS_AS(parse_stages("caption,segment"), ConfigError);
    CHECK_THROWS_AS(parse_stages("embed,paint"), ConfigError);
    CHECK_THROWS_AS(parse_stages(""), ConfigError);
}

TEST_CASE("shards partition the manifest", "[pipeline]") {
    CHECK_THROWS_AS(ShardSpec::parse("2/2"), ConfigError);
    CHECK_THROWS_AS(ShardSpec::parse("0/0"), ConfigError);
    CHECK_THROWS_AS(ShardSpec::parse("1"), ConfigError);
    CHECK_THROWS_AS(ShardSpec::parse("a/2"), ConfigError);

    const auto s0 = ShardSpec::parse("0/2");
    const auto s1 = ShardSpec::parse("1/2");
    std::size_t n0 = 0;
    for (int i = 0; i < 10; ++i) {
        const std::string vid = "video" + std::to_string(i);
        CHECK(s0.contains(vid) != s1.contains(vid));
        n0 += s0.contains(vid);
        CHECK(ShardSpec::parse("0/1").contains(vid));
    }
    CHECK(n0 > 0);
    CHECK(n0 < 10);

    TempDir dir;
    const auto manifest = JobManifest::load(write_synthetic_manifest(dir.path(), 10));
    auto config = test_config();
    std::set<std::string> seen;
    for (const char* spec : {"0/2", "1/2"}) {
        config.shard = ShardSpec::parse(spec);
        MockBackend backend;
        const auto s =
            run(manifest, config, std::vector<Stage>{Stage::embed}, dir / ("shard" + std::string(1, spec[0])), backend);
        for (const auto& f : list_files(dir / ("shard" + std::string(1, spec[0])) / "status", ".json")) {
            CHECK(seen.insert(f.stem().string()).second);
        }
        CHECK(s.videos_in_shard == (spec[0] == '0' ? n0 : 10 - n0));
    }
    CHECK(seen.size() == 10);
}

TEST_CASE("manifest loading", "[pipeline]") {
    TempDir dir;
    const auto m = JobManifest::load(write_synthetic_manifest(dir.path(), 4));
    REQUIRE(m.entries.size() == 4);
    CHECK(m.entries[1].fps_native == 25.0);
    CHECK(m.entries[1].frame_source == "frames/video1");
    CHECK(m.entries[2].metadata_path == std::nullopt);

    write_text(dir / "dup.jsonl",
               "{\"video_id\":\"a\",\"fps_native\":30,\"frame_count\":10}\n{\"video_id\":\"a\",\"fps_native\":30,"
               "\"frame_count\":10}\n");
    CHECK_THROWS_AS(JobManifest::load(dir / "dup.jsonl"), ConfigError);
    write_text(dir / "bad.jsonl", "{\"video_id\":\"../x\",\"fps_native\":30,\"frame_count\":10}\n");
    CHECK_THROWS_AS(JobManifest::load(dir / "bad.jsonl"), ConfigError);
    write_text(dir / "torn.jsonl", "{\"video_id\":\"a\",\n");
    CHECK_THROWS_WITH(JobManifest::load(dir / "torn.jsonl"), Catch::Matchers::ContainsSubstring(":1"));
    write_text(dir / "inline.jsonl",
               "{\"video_id\":\"b\",\"fps_native\":30,\"frame_count\":30,\"metadata\":{\"title\":\"T\",\"duration_s\":"
               "1.0}}\n");
    const auto inl = JobManifest::load(dir / "inline.jsonl");
    REQUIRE(inl.entries[0].metadata);
    CHECK(inl.entries[0].metadata->title == "T");
}

TEST_CASE("video state transitions", "[pipeline]") {
    VideoState s;
    s.video_id = "v";
    CHECK_THROWS_AS(s.set(Stage::segment, {StageStatus::done, 1, std::nullopt}), std::logic_error);
    s.set(Stage::embed, {StageStatus::failed, 1, "boom"});
    s.set(Stage::embed, {StageStatus::done, 2, std::nullopt});
    CHECK_THROWS_AS(s.set(Stage::embed, {StageStatus::failed, 3, "again"}), std::logic_error);
    CHECK_THROWS_AS(s.set(Stage::embed, {StageStatus::pending, 2, std::nullopt}), std::logic_error);
    CHECK(video_state_from_json(to_json(s)) == s);
}

TEST_CASE("atomic writes", "[pipeline]") {
    TempDir dir;
    const auto p = dir / "deep/nested/file.txt";
    write_file_atomic(p, "one");
    write_file_atomic(p, "two");
    CHECK(read_text(p) == "two");
    CHECK(snapshot(dir.path()).size() == 1);
}

TEST_CASE("end-to-end run, validate and idempotent rerun", "[pipeline]") {
    TempDir dir;
    const auto manifest = JobManifest::load(write_synthetic_manifest(dir.path(), 3));
    const auto out = dir / "out";
    const auto config = test_config();
    MockBackend backend;

    const auto first = run(manifest, config, kAllStages, out, backend);
    CHECK(first.failures.empty());
    CHECK(first.all_done());
    CHECK(first.stages_run == std::array<std::size_t, 4>{3, 3, 3, 3});
    const auto report = validate(out);
    INFO(report.to_json().dump(2));
    CHECK(report.ok());
    CHECK(report.files_checked >= 15);

    // Every annotation-eligible node got a record; every caption-eligible node a caption.
    for (const auto& e : manifest.entries) {
        const auto tree = tree_from_json(nlohmann::json::parse(read_text(ArtifactPaths{out}.tree(e.video_id))));
        std::size_t cap = 0;
        std::size_t ann = 0;
        for (const auto& n : tree.nodes()) {
            cap += n.caption_eligible;
            ann += n.annotation_eligible;
        }
        CHECK(read_lines(ArtifactPaths{out}.captions(e.video_id)).size() == cap);
        CHECK(read_lines(ArtifactPaths{out}.annotations(e.video_id)).size() == ann);
        CHECK_FALSE(fs::exists(ArtifactPaths{out}.captions_partial(e.video_id)));
    }

    const auto before = snapshot(out);
    backend.reset_call_counts();
    const auto second = run(manifest, config, kAllStages, out, backend);
    CHECK(second.work_performed() == 0);
    CHECK(second.already_done == std::array<std::size_t, 4>{3, 3, 3, 3});
    CHECK(backend.call_counts().total() == 0);
    CHECK(snapshot(out) == before);

    // Worker count does not change the artifacts.
    MockBackend other;
    run(manifest, test_config(1), kAllStages, dir / "serial", other);
    CHECK(artifacts_only(dir / "serial") == artifacts_only(out));
}

TEST_CASE("crash during captioning resumes without redoing work", "[pipeline]") {
    TempDir dir;
    const auto manifest_path = write_synthetic_manifest(dir.path(), 1);
    const auto manifest = JobManifest::load(manifest_path);
    const std::string vid = manifest.entries[0].video_id;
    const ArtifactPaths paths{dir / "out"};
    const auto config = test_config(1);

    MockBackend reference;
    run(manifest, config, kAllStages, dir / "clean", reference);
    const auto total_image = reference.call_counts()[RequestKind::caption_image];
    const auto total_video = reference.call_counts()[RequestKind::caption_video];
    REQUIRE(total_image + total_video > 6);

    MockBackend inner;
    CrashingBackend crashing(inner, RequestKind::caption_image, 3);
    CHECK_THROWS_AS(run(manifest, config, kAllStages, paths.root, crashing), SimulatedCrash);

    const auto state = video_state_from_json(nlohmann::json::parse(read_text(paths.status(vid))));
    CHECK(state.at(Stage::segment).status == StageStatus::done);
    CHECK(state.at(Stage::caption).status == StageStatus::pending);
    REQUIRE(fs::exists(paths.captions_partial(vid)));
    auto logged = read_lines(paths.captions_partial(vid));
    REQUIRE_FALSE(logged.empty());
    // A torn final line is ignored on resume.
    std::ofstream(paths.captions_partial(vid), std::ios::app) << "{\"video_id\":\"" << vid << "\",\"node_";

    MockBackend resumed;
    const auto summary = run(manifest, config, kAllStages, paths.root, resumed);
    CHECK(summary.all_done());
    CHECK(summary.already_done[0] == 1);
    CHECK(summary.already_done[1] == 1);
    CHECK(resumed.call_counts()[RequestKind::embed_window] == 0);
    CHECK(resumed.call_counts()[RequestKind::caption_image] + resumed.call_counts()[RequestKind::caption_video] ==
          total_image + total_video - static_cast<std::int64_t>(logged.size()));
    CHECK(validate(paths.root).ok());
    CHECK(artifacts_only(paths.root) == artifacts_only(dir / "clean"));
}

TEST_CASE("failing stages are recorded and capped", "[pipeline]") {
    TempDir dir;
    const auto manifest = JobManifest::load(write_synthetic_manifest(dir.path(), 2));
    auto config = test_config(1);
    config.max_attempts_per_stage = 2;
    MockBackend inner;
    ScriptedBackend refusing([&](const BackendRequest& req) -> BackendResponse {
        if (req.kind() == RequestKind::complete) throw BackendRefusal("no");
        return inner.call(req);
    });

    for (int attempt = 1; attempt <= 3; ++attempt) {
        const auto s = run(manifest, config, kAllStages, dir / "out", refusing);
        REQUIRE(s.failures.size() == 2);
        for (const auto& f : s.failures) CHECK(f.stage == Stage::aggregate);
        if (attempt == 3) {
            CHECK(s.failures[0].reason.starts_with("attempts exhausted"));
            CHECK(s.work_performed() == 2);
            CHECK(refusing.call_counts()[RequestKind::complete] > 0);
        }
    }
    const auto st =
        video_state_from_json(nlohmann::json::parse(read_text(ArtifactPaths{dir / "out"}.status("video0"))));
    CHECK(st.at(Stage::aggregate).status == StageStatus::failed);
    CHECK(st.at(Stage::aggregate).attempts == 2);
    CHECK(st.at(Stage::caption).status == StageStatus::done);
    CHECK(validate(dir / "out").ok());

    // Later stages cannot run while a prerequisite is missing.
    const auto s = run(manifest, config, std::vector<Stage>{Stage::caption, Stage::aggregate}, dir / "fresh", inner);
    REQUIRE(s.failures.size() == 2);
    CHECK(s.failures[0].reason.starts_with("prerequisite stage embed"));
}

TEST_CASE("validate finds planted defects", "[pipeline]") {
    TempDir dir;
    const auto manifest = JobManifest::load(write_synthetic_manifest(dir.path(), 1));
    const auto out = dir / "out";
    MockBackend backend;
    run(manifest, test_config(1), kAllStages, out, backend);
    REQUIRE(validate(out).ok());
    const ArtifactPaths paths{out};
    const std::string vid = "video0";
    const auto tree = nlohmann::json::parse(read_text(paths.tree(vid)));

    SECTION("annotation on a node that does not exist") {
        auto lines = read_lines(paths.annotations(vid));
        auto j = nlohmann::json::parse(lines.back());
        j["node_id"] = 999999;
        lines.back() = j.dump();
        write_lines(paths.annotations(vid), lines);
        const auto r = validate(out);
        CHECK(r.violations.size() == 1);
        CHECK(r.count(Violation::Kind::cross_reference) == 1);
        CHECK(r.violations[0].line == lines.size());
    }
    SECTION("caption on an ineligible node") {
        NodeId ineligible = -1;
        for (const auto& n : tree["nodes"])
            if (!n["caption_eligible"].get<bool>()) ineligible = n["id"].get<NodeId>();
        REQUIRE(ineligible >= 0);
        auto lines = read_lines(paths.captions(vid));
        auto j = nlohmann::json::parse(lines.front());
        j["node_id"] = ineligible;
        lines.front() = j.dump();
        write_lines(paths.captions(vid), lines);
        const auto r = validate(out);
        CHECK_FALSE(r.ok());
        CHECK(r.count(Violation::Kind::cross_reference) >= 1);
    }
    SECTION("malformed line") {
        auto lines = read_lines(paths.captions(vid));
        lines.push_back("{not json");
        write_lines(paths.captions(vid), lines);
        const auto r = validate(out);
        CHECK(r.count(Violation::Kind::schema) == 1);
    }
    SECTION("status claims done but the artifact is gone") {
        fs::remove(paths.annotations(vid));
        CHECK(validate(out).count(Violation::Kind::state) >= 1);
    }
}
