#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "truckcast/pipeline.hpp"

using namespace truckcast;
namespace fs = std::filesystem;

namespace {

/// Fixture shrunk to seconds of runtime: fewer trucks, four days, two epochs.
PipelineConfig tiny_config(const std::string& out_dir) {
    PipelineConfig cfg = default_fixture_config();
    cfg.out_dir = out_dir;
    cfg.world.n_trucks = 10;
    cfg.world.duration_days = 4;
    cfg.train.epochs = 2;
    cfg.train.patience = 2;
    for (auto& [name, m] : cfg.models) {
        m.hidden = 8;
        m.embed_dim = 2;
    }
    cfg.seeds = {0};
    cfg.jobs = 2;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("full pipeline writes every artifact and reruns identically") {
    const std::string dir = (fs::temp_directory_path() / "tc_pipe1").string();
    fs::remove_all(dir);
    auto cfg = tiny_config(dir);
    run_pipeline(cfg);

    for (const std::string rel :
         {"synth/trajectories.csv", "synth/groundtruth.json", "ingest/staypoints.csv",
          "ingest/parse_report.json", "features/sidecar.json", "features/activity.csv",
          "features/classes.csv", "features/adjacency.csv", "features/semantic.csv",
          "features/samples_train.bin", "features/samples_test.bin",
          "train/model_birnn_seed0.bin", "train/history_pdformer_lite_seed0.csv",
          "predict/predictions_seed0.csv", "evaluate/metrics.json",
          "evaluate/confusion_seed0.csv", "report/predictions.geojson", "report/summary.txt"})
        CHECK(fs::exists(dir + "/" + rel));

    // every stage carries a manifest with input hashes and a config snapshot
    for (const std::string stage :
         {"synth", "ingest", "features", "train", "predict", "evaluate", "report"}) {
        const std::string mpath = dir + "/" + stage + "/manifest.json";
        REQUIRE(fs::exists(mpath));
        auto manifest = nlohmann::json::parse(slurp(mpath));
        CHECK(manifest.at("stage") == stage);
        CHECK(manifest.contains("config"));
        for (const auto& [path, hash] : manifest.at("inputs").items()) {
            CHECK(fs::exists(path));
            CHECK(file_hash(path) == hash.get<std::string>());
        }
    }

    auto metrics = nlohmann::json::parse(slurp(dir + "/evaluate/metrics.json"));
    CHECK(metrics.at("per_seed").size() == 1);
    CHECK(metrics.at("per_seed")[0].at("ensemble").contains("macro_f1"));
    CHECK(metrics.at("baseline_majority").contains("macro_f1"));

    // determinism: a second run with the same config is byte-identical
    const std::string dir2 = (fs::temp_directory_path() / "tc_pipe2").string();
    fs::remove_all(dir2);
    auto cfg2 = tiny_config(dir2);
    run_pipeline(cfg2);
    CHECK(slurp(dir + "/evaluate/metrics.json") == slurp(dir2 + "/evaluate/metrics.json"));
    CHECK(slurp(dir + "/synth/trajectories.csv") == slurp(dir2 + "/synth/trajectories.csv"));
}

TEST_CASE("geojson export is well formed and round-trips properties") {
    const std::string dir = (fs::temp_directory_path() / "tc_pipe1").string();
    REQUIRE(fs::exists(dir + "/report/predictions.geojson"));  // produced above
    auto gj = nlohmann::json::parse(slurp(dir + "/report/predictions.geojson"));
    CHECK(gj.at("type") == "FeatureCollection");
    const auto& features = gj.at("features");
    REQUIRE(!features.empty());

    auto preds = slurp(dir + "/predict/predictions_seed0.csv");
    std::istringstream ps(preds);
    std::string line;
    std::getline(ps, line);  // header
    std::size_t row = 0;
    while (std::getline(ps, line) && row < features.size()) {
        std::istringstream ls(line);
        std::string f;
        std::vector<std::string> cols;
        while (std::getline(ls, f, ',')) cols.push_back(f);
        const auto& props = features[row].at("properties");
        CHECK(props.at("cell_id").get<int>() == std::stoi(cols[0]));
        CHECK(props.at("slot").get<int>() == std::stoi(cols[1]));
        CHECK(props.at("p0").get<double>() == doctest::Approx(std::stod(cols[2])).epsilon(1e-9));
        CHECK(props.at("pred_class").get<int>() == std::stoi(cols[5]));
        CHECK(props.at("true_class").get<int>() == std::stoi(cols[6]));
        ++row;
    }
    CHECK(row == features.size());

    for (const auto& feat : features) {
        const auto& ring = feat.at("geometry").at("coordinates")[0];
        REQUIRE(ring.size() == 5);  // closed square
        CHECK(ring[0] == ring[4]);
        for (const auto& pt : ring) {
            // lon,lat order: the fixture sits near (104 E, 30.5 N)
            CHECK(pt[0].get<double>() > 100.0);
            CHECK(pt[1].get<double>() < 35.0);
        }
    }
}

TEST_CASE("a missing input fails the stage and leaves a marker") {
    const std::string dir = (fs::temp_directory_path() / "tc_pipe_fail").string();
    fs::remove_all(dir);
    PipelineConfig cfg = tiny_config(dir);
    cfg.use_synth = false;
    cfg.input_csv = dir + "/does_not_exist.csv";
    CHECK_THROWS_WITH_AS(stage_ingest(cfg), doctest::Contains("does_not_exist"),
                         std::runtime_error);
    CHECK(fs::exists(dir + "/ingest/FAILED"));
    // a later successful run clears the marker
    cfg.use_synth = true;
    stage_synth(cfg);
    stage_ingest(cfg);
    CHECK(!fs::exists(dir + "/ingest/FAILED"));
}

TEST_CASE("config json round trip preserves every field") {
    PipelineConfig cfg = default_fixture_config();
    cfg.horizon = 3;
    cfg.seeds = {4, 5, 6};
    cfg.keep_fraction = 0.4;
    cfg.models.at("tcn").dilations = {1, 2, 4};
    cfg.train.class_weights = {0.5, 1.5, 2.0};
    cfg.ensemble.weights = {1.0, 2.0, 3.0, 4.0};
    auto j = config_to_json(cfg);
    auto back = config_from_json(j);
    CHECK(back.horizon == 3);
    CHECK(back.seeds == std::vector<std::uint64_t>{4, 5, 6});
    CHECK(back.keep_fraction == 0.4);
    CHECK(back.models.at("tcn").dilations == std::vector<int>{1, 2, 4});
    CHECK(back.train.class_weights == std::array<double, 3>{0.5, 1.5, 2.0});
    CHECK(back.ensemble.weights == std::array<double, 4>{1.0, 2.0, 3.0, 4.0});
    CHECK(back.world.n_trucks == cfg.world.n_trucks);
    CHECK(back.world.sites.size() == cfg.world.sites.size());
    CHECK(config_to_json(back) == j);  // fixed point
}

TEST_CASE("prepare_experiment wires the documented defaults") {
    PipelineConfig cfg = default_fixture_config();
    CHECK(cfg.staypoint.delta_m == 200.0);
    CHECK(cfg.staypoint.theta_s == 600);
    CHECK(cfg.cell_size_m == 1000.0);
    CHECK(cfg.slot_len_s == 1800);
    CHECK(cfg.keep_fraction == 0.25);
    CHECK(cfg.top_fraction == 0.10);
    CHECK(cfg.k == 12);
    CHECK(cfg.train.batch_size == 16);
    CHECK(cfg.train.class_weights == std::array<double, 3>{0.7, 1.2, 1.1});
    CHECK(cfg.ensemble.weights == std::array<double, 4>{1.1, 1.1, 0.5, 1.3});
    CHECK(cfg.train_ratio == 0.8);
}
