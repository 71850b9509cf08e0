#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "captree/error.hpp"
#include "captree/pipeline.hpp"
#include "captree/resampler.hpp"
#include "captree/stats.hpp"

namespace fs = std::filesystem;
using captree::Stage;

namespace {

// Exit codes: 0 success, 1 validation violations, 2 systemic failure.
constexpr int kExitViolations = 1;
constexpr int kExitSystemic = 2;

struct RunArgs {
    fs::path manifest;
    std::optional<fs::path> config;
    std::string stages = "embed,segment,caption,aggregate";
    std::optional<std::string> shard;
    bool resume = false;
    fs::path out = "out";
    std::optional<std::size_t> workers;
};

struct ResampleArgs {
    fs::path annotations;
    std::optional<fs::path> config;
    std::size_t k = 1000;
    std::size_t target = 10'000'000;
    std::uint64_t seed = 17;
    fs::path out = "resample";
    std::size_t threads = 1;
};

struct StatsArgs {
    fs::path annotations;
    fs::path trees;
    fs::path out = "report.json";
    std::optional<fs::path> csv_dir;
    std::size_t threads = 1;
    std::size_t top = 50;
};

captree::PipelineConfig load_config(const std::optional<fs::path>& path) {
    return path ? captree::PipelineConfig::load(*path) : captree::PipelineConfig{};
}

nlohmann::json summary_json(const captree::RunSummary& s) {
    nlohmann::json stages = nlohmann::json::object();
    for (Stage st : captree::kAllStages) {
        const auto i = static_cast<std::size_t>(st);
        stages[std::string(captree::to_string(st))] = {{"run", s.stages_run[i]}, {"already_done", s.already_done[i]}};
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : s.failures) {
        failures.push_back({{"video_id", f.video_id}, {"stage", captree::to_string(f.stage)}, {"reason", f.reason}});
    }
    return {{"videos_in_shard", s.videos_in_shard}, {"videos_complete", s.videos_complete},
            {"work_performed", s.work_performed()}, {"all_done", s.all_done()},
            {"stages", std::move(stages)},          {"failures", std::move(failures)}};
}

int cmd_run(const RunArgs& a) {
    captree::PipelineConfig config = load_config(a.config);
    if (a.shard) config.shard = captree::ShardSpec::parse(*a.shard);
    if (a.workers) config.workers = *a.workers;
    config.validate();
    const auto stages = captree::parse_stages(a.stages);
    const auto manifest = captree::JobManifest::load(a.manifest);

    if (!a.resume) {
        const captree::ArtifactPaths paths{a.out};
        for (const auto& e : manifest.entries) {
            if (config.shard.contains(e.video_id) && fs::exists(paths.status(e.video_id))) {
                std::cerr << "captree: " << a.out.string() << " already holds state for " << e.video_id
                          << "; pass --resume to continue it\n";
                return kExitSystemic;
            }
        }
    }

    auto backend = captree::make_backend(config.backend);
    std::cerr << "captree: backend " << backend->describe() << '\n';
    const auto summary = captree::run(manifest, config, stages, a.out, *backend);
    std::cout << summary_json(summary).dump(2) << '\n';
    return 0;
}

int cmd_resample(const ResampleArgs& a) {
    const captree::PipelineConfig config = load_config(a.config);
    std::vector<std::pair<std::string, captree::ActionRef>> actions;
    std::size_t malformed = 0;
    std::size_t na = 0;
    for (const auto& file : captree::list_files(a.annotations, ".jsonl")) {
        std::ifstream in(file);
        if (!in) throw captree::StorageError("cannot read " + file.string());
        for (std::string line; std::getline(in, line);) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                const auto rec = captree::annotation_from_json(nlohmann::json::parse(line));
                if (rec.na_action) {
                    ++na;
                    continue;
                }
                actions.emplace_back(rec.action_brief, captree::ActionRef{rec.video_id, rec.node_id});
            } catch (const nlohmann::json::exception&) {
                ++malformed;
            } catch (const captree::SchemaViolation&) {
                ++malformed;
            }
        }
    }

    auto backend = captree::make_backend(config.backend);
    captree::KMeansOptions opts;
    opts.threads = a.threads;
    const auto result = captree::semantic_resample(actions, *backend, a.k, a.target, a.seed, opts);

    std::string plan;
    for (const auto& d : result.plan.draws) {
        const auto& group = result.table.groups()[d.item];
        const auto& ref = group.members.front();
        plan += nlohmann::json{{"canonical_text", group.canonical_text},
                               {"cluster", d.cluster},
                               {"ref", {{"video_id", ref.video_id}, {"node_id", ref.node_id}}},
                               {"count", group.count}}
                    .dump() +
                '\n';
    }
    captree::write_file_atomic(a.out / "plan.jsonl", plan);

    nlohmann::json report = captree::cluster_report(result.model);
    report["target_size"] = a.target;
    report["actions"] = result.table.total_count();
    report["distinct_actions"] = result.texts.size();
    report["duplicate_groups"] = result.table.duplicate_groups();
    report["duplicate_instances"] = result.table.duplicate_instances();
    report["na_skipped"] = na;
    report["malformed_lines"] = malformed;
    captree::write_file_atomic(a.out / "cluster_report.json", report.dump(2) + "\n");
    std::cerr << "captree: " << result.plan.draws.size() << " draws over " << result.model.k << " clusters\n";
    return 0;
}

int cmd_stats(const StatsArgs& a) {
    captree::StatsOptions opts;
    opts.top_ngrams = a.top;
    const auto acc = captree::compute_stats(
        captree::list_files(a.annotations, ".jsonl"),
        a.trees.empty() ? std::vector<fs::path>{} : captree::list_files(a.trees, ".json"), a.threads, opts);
    captree::write_file_atomic(a.out, acc.report().dump(2) + "\n");
    if (a.csv_dir) acc.write_csvs(*a.csv_dir);
    if (acc.malformed_lines() > 0) std::cerr << "captree: skipped " << acc.malformed_lines() << " malformed line(s)\n";
    return 0;
}

int cmd_validate(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw captree::StorageError("not a directory: " + dir.string());
    const auto report = captree::validate(dir);
    std::cout << report.to_json().dump(2) << '\n';
    return report.ok() ? 0 : kExitViolations;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical video annotation pipeline"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "Run pipeline stages over a manifest");
    run->add_option("--manifest", run_args.manifest, "Job manifest (JSONL)")->required()->check(CLI::ExistingFile);
    run->add_option("--config", run_args.config, "Pipeline config (TOML)")->check(CLI::ExistingFile);
    run->add_option("--stages", run_args.stages, "Comma-separated contiguous stage list")->capture_default_str();
    run->add_option("--shard", run_args.shard, "Shard i/n");
    run->add_flag("--resume", run_args.resume, "Continue an existing output directory");
    run->add_option("--out", run_args.out, "Artifact directory")->capture_default_str();
    run->add_option("--workers", run_args.workers, "Videos processed concurrently")->check(CLI::PositiveNumber);

    ResampleArgs rs;
    auto* resample = app.add_subcommand("resample", "Cluster-balanced resampling of brief actions");
    resample->add_option("--annotations", rs.annotations, "Annotation directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    resample->add_option("--config", rs.config, "Pipeline config (TOML) for backend settings")
        ->check(CLI::ExistingFile);
    resample->add_option("--k", rs.k, "Cluster count")->capture_default_str()->check(CLI::PositiveNumber);
    resample->add_option("--target", rs.target, "Number of draws")->capture_default_str()->check(CLI::PositiveNumber);
    resample->add_option("--seed", rs.seed, "Seed")->capture_default_str();
    resample->add_option("--out", rs.out, "Output directory")->capture_default_str();
    resample->add_option("--threads", rs.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    StatsArgs st;
    auto* stats = app.add_subcommand("stats", "Corpus statistics");
    stats->add_option("--annotations", st.annotations, "Annotation directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    stats->add_option("--trees", st.trees, "Tree directory")->check(CLI::ExistingDirectory);
    stats->add_option("--out", st.out, "Report path")->capture_default_str();
    stats->add_option("--csv-dir", st.csv_dir, "Directory for histogram and n-gram CSVs");
    stats->add_option("--threads", st.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    stats->add_option("--top", st.top, "N-grams kept per table")->capture_default_str();

    fs::path validate_dir;
    auto* validate = app.add_subcommand("validate", "Check artifacts against schemas and cross-references");
    validate->add_option("dir", validate_dir, "Artifact directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(run_args);
        if (*resample) return cmd_resample(rs);
        if (*stats) return cmd_stats(st);
        if (*validate) return cmd_validate(validate_dir);
    } catch (const captree::Error& e) {
        std::cerr << "captree: " << e.what() << '\n';
        return kExitSystemic;
    } catch (const std::exception& e) {
        std::cerr << "captree: fatal: " << e.what() << '\n';
        return kExitSystemic;
    }
    return 0;
}
