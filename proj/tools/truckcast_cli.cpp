#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "truckcast/pipeline.hpp"

namespace {

truckcast::PipelineConfig resolve_config(const std::string& config_path, bool default_fixture,
                                         const std::string& out_dir, int seed_override,
                                         int jobs, int horizon) {
    truckcast::PipelineConfig cfg;
    if (default_fixture)
        cfg = truckcast::default_fixture_config();
    else if (!config_path.empty())
        cfg = truckcast::load_config(config_path);
    else
        throw CLI::ValidationError("--config PATH or --default-fixture is required");

    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
    if (jobs > 0) cfg.jobs = jobs;
    if (horizon > 0) cfg.horizon = horizon;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"truckcast: truck GPS traces to grid-level activity predictions"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    bool default_fixture = false;
    int seed_override = -1, jobs = 0, horizon = 0;
    app.add_option("--config", config_path, "pipeline config JSON");
    app.add_flag("--default-fixture", default_fixture, "use the built-in synthetic fixture");
    app.add_option("--out", out_dir, "output directory override");
    app.add_option("--seed", seed_override, "single-seed override");
    app.add_option("--jobs", jobs, "worker cap for training jobs");
    app.add_option("--horizon", horizon, "prediction horizon in slots");

    auto* synth = app.add_subcommand("synth", "generate synthetic trajectories");
    auto* ingest = app.add_subcommand("ingest", "parse trajectories and extract stay points");
    auto* features = app.add_subcommand("features", "grid, label, and featurize");
    auto* train = app.add_subcommand("train", "train the base models");
    auto* predict = app.add_subcommand("predict", "predict and fuse model outputs");
    auto* evaluate = app.add_subcommand("evaluate", "compute metrics");
    auto* report = app.add_subcommand("report", "emit GeoJSON and a summary");
    auto* pipeline = app.add_subcommand("pipeline", "run every stage");

    CLI11_PARSE(app, argc, argv);

    try {
        truckcast::PipelineConfig cfg =
            resolve_config(config_path, default_fixture, out_dir, seed_override, jobs, horizon);
        if (synth->parsed()) truckcast::stage_synth(cfg);
        if (ingest->parsed()) truckcast::stage_ingest(cfg);
        if (features->parsed()) truckcast::stage_features(cfg);
        if (train->parsed()) truckcast::stage_train(cfg);
        if (predict->parsed()) truckcast::stage_predict(cfg);
        if (evaluate->parsed()) truckcast::stage_evaluate(cfg);
        if (report->parsed()) truckcast::stage_report(cfg);
        if (pipeline->parsed()) truckcast::run_pipeline(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
