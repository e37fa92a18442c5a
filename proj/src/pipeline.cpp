#include "truckcast/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "truckcast/timeutil.hpp"

namespace fs = std::filesystem;

namespace truckcast {

PipelineConfig::PipelineConfig() {
    ModelConfig birnn;
    birnn.kind = ModelKind::birnn;
    ModelConfig tcn;
    tcn.kind = ModelKind::tcn;
    tcn.dilations = {1, 2};
    ModelConfig stgcn;
    stgcn.kind = ModelKind::stgcn_lite;
    stgcn.dilations = {1, 1};
    ModelConfig pdf;
    pdf.kind = ModelKind::pdformer_lite;
    pdf.kappa = 3;
    models = {{"birnn", birnn}, {"tcn", tcn}, {"stgcn_lite", stgcn}, {"pdformer_lite", pdf}};
}

PipelineConfig default_fixture_config() {
    PipelineConfig cfg;
    cfg.out_dir = "runs/fixture";
    cfg.use_synth = true;
    cfg.world = default_world();
    cfg.train.epochs = 16;
    cfg.train.patience = 5;
    cfg.train.lr = 2e-3;
    return cfg;
}

namespace {

nlohmann::json model_to_json(const ModelConfig& m) {
    return {{"kind", to_string(m.kind)},       {"hidden", m.hidden},
            {"kernel", m.kernel},              {"dilations", m.dilations},
            {"kappa", m.kappa},                {"dropout", m.dropout},
            {"embed_dim", m.embed_dim},        {"use_counts", m.use_counts},
            {"spatial_enabled", m.spatial_enabled}};
}

ModelConfig model_from_json(const nlohmann::json& j, ModelConfig base) {
    if (j.contains("kind")) base.kind = model_kind_from_string(j.at("kind").get<std::string>());
    base.hidden = j.value("hidden", base.hidden);
    base.kernel = j.value("kernel", base.kernel);
    if (j.contains("dilations")) base.dilations = j.at("dilations").get<std::vector<int>>();
    base.kappa = j.value("kappa", base.kappa);
    base.dropout = j.value("dropout", base.dropout);
    base.embed_dim = j.value("embed_dim", base.embed_dim);
    base.use_counts = j.value("use_counts", base.use_counts);
    base.spatial_enabled = j.value("spatial_enabled", base.spatial_enabled);
    return base;
}

}  // namespace

nlohmann::json config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["out_dir"] = cfg.out_dir;
    j["seeds"] = cfg.seeds;
    j["jobs"] = cfg.jobs;
    j["use_synth"] = cfg.use_synth;
    j["input_csv"] = cfg.input_csv;
    j["world"] = {{"bbox", {cfg.world.bbox.lat_min, cfg.world.bbox.lon_min, cfg.world.bbox.lat_max,
                            cfg.world.bbox.lon_max}},
                  {"n_trucks", cfg.world.n_trucks},
                  {"dwell_mean_s", cfg.world.dwell_mean_s},
                  {"dwell_min_s", cfg.world.dwell_min_s},
                  {"trip_speed_mps", cfg.world.trip_speed_mps},
                  {"daily", cfg.world.daily},
                  {"weekly", cfg.world.weekly},
                  {"duration_days", cfg.world.duration_days},
                  {"t0", cfg.world.t0},
                  {"seed", cfg.world.seed},
                  {"point_interval_s", cfg.world.point_interval_s},
                  {"jitter_m", cfg.world.jitter_m},
                  {"idle_step_s", cfg.world.idle_step_s},
                  {"depart_m", cfg.world.depart_m}};
    auto& sites = j["world"]["sites"] = nlohmann::json::array();
    for (const auto& s : cfg.world.sites) sites.push_back({s.lat, s.lon, s.weight});
    j["staypoint"] = {{"delta_m", cfg.staypoint.delta_m},
                      {"theta_s", cfg.staypoint.theta_s},
                      {"max_gap_s", cfg.staypoint.max_gap_s}};
    j["cell_size_m"] = cfg.cell_size_m;
    if (cfg.bbox)
        j["bbox"] = {cfg.bbox->lat_min, cfg.bbox->lon_min, cfg.bbox->lat_max, cfg.bbox->lon_max};
    j["slot_len_s"] = cfg.slot_len_s;
    j["t0"] = cfg.t0;
    j["utc_offset_s"] = cfg.utc_offset_s;
    j["downsample"] = {{"enabled", cfg.downsample_enabled}, {"keep_fraction", cfg.keep_fraction}};
    j["labels"] = {{"mode", cfg.label_mode},
                   {"top_fraction", cfg.top_fraction},
                   {"medium_bound", cfg.medium_bound}};
    j["features"] = {{"k", cfg.k},
                     {"horizon", cfg.horizon},
                     {"dtw_radius", cfg.dtw_radius},
                     {"input_counts", cfg.input_counts}};
    j["split"] = {{"train_ratio", cfg.train_ratio}, {"chronological", cfg.chronological_split}};
    auto& jm = j["models"] = nlohmann::json::object();
    for (const auto& [name, m] : cfg.models) jm[name] = model_to_json(m);
    j["train"] = {{"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"epochs", cfg.train.epochs},
                  {"class_weights", cfg.train.class_weights},
                  {"patience", cfg.train.patience},
                  {"val_fraction", cfg.train.val_fraction},
                  {"weighted_loss", cfg.weighted_loss}};
    j["ensemble"] = {{"weights", cfg.ensemble.weights}};
    return j;
}

PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig cfg;
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    cfg.jobs = j.value("jobs", cfg.jobs);
    cfg.use_synth = j.value("use_synth", cfg.use_synth);
    cfg.input_csv = j.value("input_csv", cfg.input_csv);
    if (j.contains("world")) {
        const auto& w = j.at("world");
        if (w.contains("bbox")) {
            auto b = w.at("bbox").get<std::vector<double>>();
            cfg.world.bbox = {b.at(0), b.at(1), b.at(2), b.at(3)};
        }
        cfg.world.n_trucks = w.value("n_trucks", cfg.world.n_trucks);
        cfg.world.dwell_mean_s = w.value("dwell_mean_s", cfg.world.dwell_mean_s);
        cfg.world.dwell_min_s = w.value("dwell_min_s", cfg.world.dwell_min_s);
        cfg.world.trip_speed_mps = w.value("trip_speed_mps", cfg.world.trip_speed_mps);
        if (w.contains("daily")) cfg.world.daily = w.at("daily").get<std::array<double, 24>>();
        if (w.contains("weekly")) cfg.world.weekly = w.at("weekly").get<std::array<double, 7>>();
        cfg.world.duration_days = w.value("duration_days", cfg.world.duration_days);
        cfg.world.t0 = w.value("t0", cfg.world.t0);
        cfg.world.seed = w.value("seed", cfg.world.seed);
        cfg.world.point_interval_s = w.value("point_interval_s", cfg.world.point_interval_s);
        cfg.world.jitter_m = w.value("jitter_m", cfg.world.jitter_m);
        cfg.world.idle_step_s = w.value("idle_step_s", cfg.world.idle_step_s);
        cfg.world.depart_m = w.value("depart_m", cfg.world.depart_m);
        if (w.contains("sites")) {
            cfg.world.sites.clear();
            for (const auto& s : w.at("sites"))
                cfg.world.sites.push_back({s.at(0).get<double>(), s.at(1).get<double>(),
                                           s.at(2).get<double>()});
        }
    }
    if (j.contains("staypoint")) {
        const auto& s = j.at("staypoint");
        cfg.staypoint.delta_m = s.value("delta_m", cfg.staypoint.delta_m);
        cfg.staypoint.theta_s = s.value("theta_s", cfg.staypoint.theta_s);
        cfg.staypoint.max_gap_s = s.value("max_gap_s", cfg.staypoint.max_gap_s);
    }
    cfg.cell_size_m = j.value("cell_size_m", cfg.cell_size_m);
    if (j.contains("bbox")) {
        auto b = j.at("bbox").get<std::vector<double>>();
        cfg.bbox = BBox{b.at(0), b.at(1), b.at(2), b.at(3)};
    }
    cfg.slot_len_s = j.value("slot_len_s", cfg.slot_len_s);
    cfg.t0 = j.value("t0", cfg.t0);
    cfg.utc_offset_s = j.value("utc_offset_s", cfg.utc_offset_s);
    if (j.contains("downsample")) {
        cfg.downsample_enabled = j.at("downsample").value("enabled", cfg.downsample_enabled);
        cfg.keep_fraction = j.at("downsample").value("keep_fraction", cfg.keep_fraction);
    }
    if (j.contains("labels")) {
        cfg.label_mode = j.at("labels").value("mode", cfg.label_mode);
        cfg.top_fraction = j.at("labels").value("top_fraction", cfg.top_fraction);
        cfg.medium_bound = j.at("labels").value("medium_bound", cfg.medium_bound);
    }
    if (j.contains("features")) {
        const auto& f = j.at("features");
        cfg.k = f.value("k", cfg.k);
        cfg.horizon = f.value("horizon", cfg.horizon);
        cfg.dtw_radius = f.value("dtw_radius", cfg.dtw_radius);
        cfg.input_counts = f.value("input_counts", cfg.input_counts);
    }
    if (j.contains("split")) {
        cfg.train_ratio = j.at("split").value("train_ratio", cfg.train_ratio);
        cfg.chronological_split = j.at("split").value("chronological", cfg.chronological_split);
    }
    if (j.contains("models"))
        for (const auto& [name, jm] : j.at("models").items())
            cfg.models[name] = model_from_json(jm, cfg.models.at(name));
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        if (t.contains("class_weights"))
            cfg.train.class_weights = t.at("class_weights").get<std::array<double, 3>>();
        cfg.train.patience = t.value("patience", cfg.train.patience);
        cfg.train.val_fraction = t.value("val_fraction", cfg.train.val_fraction);
        cfg.weighted_loss = t.value("weighted_loss", cfg.weighted_loss);
    }
    if (j.contains("ensemble") && j.at("ensemble").contains("weights"))
        cfg.ensemble.weights = j.at("ensemble").at("weights").get<std::array<double, 4>>();
    return cfg;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    return config_from_json(nlohmann::json::parse(in));
}

ExperimentData prepare_experiment(const PipelineConfig& cfg,
                                  const std::vector<Trajectory>& trajectories,
                                  const std::vector<StayPoint>& staypoints) {
    ExperimentData data;

    BBox bbox;
    if (cfg.bbox) {
        bbox = *cfg.bbox;
    } else if (cfg.use_synth) {
        bbox = cfg.world.bbox;
    } else {
        if (trajectories.empty()) throw std::runtime_error("no trajectories and no bbox configured");
        bbox = {90.0, 180.0, -90.0, -180.0};
        for (const auto& tr : trajectories)
            for (const auto& p : tr.points) {
                bbox.lat_min = std::min(bbox.lat_min, p.lat);
                bbox.lat_max = std::max(bbox.lat_max, p.lat);
                bbox.lon_min = std::min(bbox.lon_min, p.lon);
                bbox.lon_max = std::max(bbox.lon_max, p.lon);
            }
    }
    data.grid = build_grid(bbox, cfg.cell_size_m);

    std::int64_t t0 = cfg.t0;
    std::int64_t t_max = 0;
    if (t0 < 0 && cfg.use_synth) t0 = cfg.world.t0;
    if (t0 < 0) {
        std::int64_t t_min = std::numeric_limits<std::int64_t>::max();
        for (const auto& sp : staypoints) t_min = std::min(t_min, sp.t_start);
        if (staypoints.empty()) throw std::runtime_error("no stay points to derive the window from");
        t0 = floor_div(t_min, cfg.slot_len_s) * cfg.slot_len_s;
    }
    if (cfg.use_synth) {
        t_max = cfg.world.t0 + static_cast<std::int64_t>(cfg.world.duration_days) * 86400;
    } else {
        for (const auto& sp : staypoints) t_max = std::max(t_max, sp.t_end + 1);
    }
    const int n_slots = static_cast<int>((t_max - t0 + cfg.slot_len_s - 1) / cfg.slot_len_s);
    if (n_slots < cfg.k + cfg.horizon) throw std::runtime_error("analysis window too short");

    CountStats stats;
    ActivityTensor full = count_activity(staypoints, data.grid, cfg.slot_len_s, t0, n_slots, &stats);

    const double keep = cfg.downsample_enabled ? cfg.keep_fraction : 1.0;
    DownsampleResult ds = downsample_grids(full, keep);
    data.tau_keep = ds.tau_keep;
    data.activity = select_cells(full, ds.retained_rows);
    data.cell_ids = data.activity.cell_ids;

    data.medium_bound = cfg.label_mode == "pin" ? cfg.medium_bound
                                                : derive_class_thresholds(data.activity, cfg.top_fraction);
    data.classes = label_classes(data.activity, data.medium_bound);

    bool any_edge = false;
    data.adj = build_adjacency(trajectories, data.grid, data.cell_ids, &any_edge);
    if (!any_edge)
        std::cerr << "warning: geographic adjacency has no edges over the retained cells\n";
    data.sem = build_semantic_matrix(data.activity, cfg.dtw_radius);

    SampleSet all = make_windows(data.classes, cfg.k, cfg.horizon, cfg.utc_offset_s, &data.activity);
    SplitConfig split;
    split.train_ratio = cfg.train_ratio;
    split.chronological = cfg.chronological_split;
    split.seed = cfg.seeds.empty() ? 0 : cfg.seeds.front();
    std::tie(data.train_set, data.test_set) = split_dataset(all, split);
    return data;
}

namespace {

struct TrainJobOutput {
    std::unique_ptr<BaseModel> model;
    TrainResult history;
};

ModelConfig configured_model(const PipelineConfig& cfg, const std::string& name) {
    ModelConfig m = cfg.models.at(name);
    m.use_counts = m.use_counts || cfg.input_counts;
    return m;
}

std::unique_ptr<BaseModel> instantiate(const PipelineConfig& cfg, const ExperimentData& data,
                                       const std::string& name, std::uint64_t init_seed) {
    return make_model(configured_model(cfg, name), data.adj, data.sem, init_seed);
}

std::uint64_t job_seed(std::uint64_t seed, std::size_t kind_idx) {
    return seed * 1000003ULL + kind_idx;
}

TrainConfig train_cfg_for(const PipelineConfig& cfg, std::uint64_t init_seed) {
    TrainConfig tc = cfg.train;
    tc.seed = init_seed;
    if (!cfg.weighted_loss) tc.class_weights = {1.0, 1.0, 1.0};
    return tc;
}

/// Trains the (seed x model) grid with a small worker pool.
std::vector<std::array<TrainJobOutput, 4>> train_grid(const ExperimentData& data,
                                                      const PipelineConfig& cfg) {
    const std::size_t n_seeds = cfg.seeds.size();
    std::vector<std::array<TrainJobOutput, 4>> grid(n_seeds);
    struct Job {
        std::size_t seed_idx;
        std::size_t kind_idx;
    };
    std::vector<Job> jobs;
    for (std::size_t s = 0; s < n_seeds; ++s)
        for (std::size_t m = 0; m < kModelOrder.size(); ++m) jobs.push_back({s, m});

    int n_workers = cfg.jobs > 0 ? cfg.jobs : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::max(1, std::min<int>(n_workers, static_cast<int>(jobs.size())));

    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(jobs.size());
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const auto [si, mi] = jobs[i];
            try {
                const std::uint64_t init_seed = job_seed(cfg.seeds[si], mi);
                auto model = instantiate(cfg, data, kModelOrder[mi], init_seed);
                TrainResult hist = train_model(*model, data.train_set, train_cfg_for(cfg, init_seed));
                grid[si][mi] = {std::move(model), std::move(hist)};
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error("training job failed: " + e);
    return grid;
}

std::vector<int> truth_from_keys(const SampleSet& test, const ProbTensor& probs) {
    std::vector<int> truth;
    truth.reserve(probs.keys.size());
    for (const auto& [cell, slot] : probs.keys) truth.push_back(test.classes.at(cell, slot));
    return truth;
}

SeedOutcome assemble_outcome(const ExperimentData& data, const PipelineConfig& cfg,
                             std::uint64_t seed, std::array<TrainJobOutput, 4>& row) {
    SeedOutcome out;
    out.seed = seed;
    std::vector<ProbTensor> per_model;
    for (std::size_t mi = 0; mi < kModelOrder.size(); ++mi) {
        ProbTensor probs = predict(*row[mi].model, data.test_set);
        std::vector<int> pred = predict_classes(probs);
        std::vector<int> truth = truth_from_keys(data.test_set, probs);
        out.model_strict[kModelOrder[mi]] = prf(confusion_matrix(pred, truth));
        per_model.push_back(probs);
        out.model_probs[kModelOrder[mi]] = std::move(probs);
    }
    out.fused = soft_vote(per_model, cfg.ensemble);
    out.pred = predict_classes(out.fused);
    out.truth = truth_from_keys(data.test_set, out.fused);
    out.ensemble_strict = prf(confusion_matrix(out.pred, out.truth));
    out.ensemble_relaxed =
        relaxed_high_activity(out.pred, out.truth, out.fused.keys, data.grid, data.cell_ids);
    return out;
}

}  // namespace

SeedOutcome run_seed(const ExperimentData& data, const PipelineConfig& cfg, std::uint64_t seed) {
    PipelineConfig one = cfg;
    one.seeds = {seed};
    auto grid = train_grid(data, one);
    return assemble_outcome(data, cfg, seed, grid[0]);
}

std::vector<SeedOutcome> run_seeds(const ExperimentData& data, const PipelineConfig& cfg) {
    auto grid = train_grid(data, cfg);
    std::vector<SeedOutcome> out;
    out.reserve(cfg.seeds.size());
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
        out.push_back(assemble_outcome(data, cfg, cfg.seeds[s], grid[s]));
    return out;
}

MetricsReport majority_baseline(const ExperimentData& data) {
    std::array<long long, 3> hist{};
    const auto& train = data.train_set;
    for (std::size_t c = 0; c < train.n_cells(); ++c)
        for (int tau : train.target_slots) ++hist[train.classes.at(static_cast<int>(c), tau)];
    int majority = 0;
    for (int c = 1; c < 3; ++c)
        if (hist[c] > hist[majority]) majority = c;

    std::vector<int> pred, truth;
    const auto& test = data.test_set;
    for (int tau : test.target_slots)
        for (std::size_t c = 0; c < test.n_cells(); ++c) {
            pred.push_back(majority);
            truth.push_back(test.classes.at(static_cast<int>(c), tau));
        }
    return prf(confusion_matrix(pred, truth));
}

nlohmann::json metrics_to_json(const MetricsReport& rep) {
    nlohmann::json j;
    for (int c = 0; c < 3; ++c) {
        j["precision"].push_back(rep.per_class[c].precision);
        j["recall"].push_back(rep.per_class[c].recall);
        j["f1"].push_back(rep.per_class[c].f1);
    }
    j["macro_f1"] = rep.macro_f1;
    if (rep.has_spread) {
        for (int c = 0; c < 3; ++c) {
            j["precision_std_n_minus_1"].push_back(rep.per_class_std[c].precision);
            j["recall_std_n_minus_1"].push_back(rep.per_class_std[c].recall);
            j["f1_std_n_minus_1"].push_back(rep.per_class_std[c].f1);
        }
        j["macro_f1_std_n_minus_1"] = rep.macro_f1_std;
    }
    return j;
}

nlohmann::json build_metrics_json(const PipelineConfig& cfg,
                                  const std::vector<SeedOutcome>& outcomes,
                                  const MetricsReport& baseline) {
    nlohmann::json j;
    j["version"] = kVersion;
    j["horizon"] = cfg.horizon;
    j["seeds"] = cfg.seeds;
    auto& per_seed = j["per_seed"] = nlohmann::json::array();
    for (const auto& oc : outcomes) {
        nlohmann::json s;
        s["seed"] = oc.seed;
        for (const auto& [name, rep] : oc.model_strict) s["models"][name] = metrics_to_json(rep);
        s["ensemble"] = metrics_to_json(oc.ensemble_strict);
        s["ensemble_relaxed_high"] = {{"precision", oc.ensemble_relaxed.precision},
                                      {"recall", oc.ensemble_relaxed.recall},
                                      {"f1", oc.ensemble_relaxed.f1}};
        per_seed.push_back(std::move(s));
    }
    if (outcomes.size() >= 2) {
        for (const auto& name : kModelOrder) {
            std::vector<MetricsReport> reports;
            for (const auto& oc : outcomes) reports.push_back(oc.model_strict.at(name));
            j["aggregate"]["models"][name] = metrics_to_json(aggregate_seeds(reports));
        }
        std::vector<MetricsReport> ens;
        for (const auto& oc : outcomes) ens.push_back(oc.ensemble_strict);
        j["aggregate"]["ensemble"] = metrics_to_json(aggregate_seeds(ens));
    }
    j["baseline_majority"] = metrics_to_json(baseline);
    return j;
}

void export_geojson(const std::string& path, const GridSpec& grid,
                    std::span<const int> cell_ids, const ProbTensor& fused,
                    std::span<const int> pred, std::span<const int> truth) {
    nlohmann::json fc;
    fc["type"] = "FeatureCollection";
    auto& features = fc["features"] = nlohmann::json::array();
    for (std::size_t i = 0; i < fused.rows.size(); ++i) {
        const auto [cell_row, slot] = fused.keys[i];
        const int cell = cell_ids[cell_row];
        const int r = grid.row_of(cell), c = grid.col_of(cell);
        double lat0, lon0, lat1, lon1;
        grid.cell_corner(r, c, lat0, lon0);
        grid.cell_corner(r + 1, c + 1, lat1, lon1);
        nlohmann::json poly = nlohmann::json::array();
        poly.push_back({lon0, lat0});
        poly.push_back({lon1, lat0});
        poly.push_back({lon1, lat1});
        poly.push_back({lon0, lat1});
        poly.push_back({lon0, lat0});  // closed ring
        nlohmann::json f;
        f["type"] = "Feature";
        f["geometry"] = {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({poly})}};
        f["properties"] = {{"cell_id", cell},        {"slot", slot},
                           {"pred_class", pred[i]},  {"true_class", truth[i]},
                           {"p0", fused.rows[i][0]}, {"p1", fused.rows[i][1]},
                           {"p2", fused.rows[i][2]}};
        features.push_back(std::move(f));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << fc.dump() << '\n';
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file: " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
        if (!in) break;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void write_manifest(const std::string& dir, const std::string& stage,
                    const std::vector<std::string>& inputs, const PipelineConfig& cfg) {
    nlohmann::json m;
    m["stage"] = stage;
    m["version"] = kVersion;
    m["seeds"] = cfg.seeds;
    auto& in = m["inputs"] = nlohmann::json::object();
    for (const auto& p : inputs) in[p] = file_hash(p);
    m["config"] = config_to_json(cfg);
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << m.dump(2) << '\n';
}

namespace {

std::string stage_dir(const PipelineConfig& cfg, const std::string& stage) {
    const std::string d = cfg.out_dir + "/" + stage;
    fs::create_directories(d);
    return d;
}

/// Marks the stage failed but keeps partial artifacts for inspection.
[[noreturn]] void fail_stage(const std::string& dir, const std::string& stage,
                             const std::exception& e) {
    std::ofstream marker(dir + "/FAILED");
    marker << stage << ": " << e.what() << '\n';
    throw std::runtime_error(stage + " failed: " + e.what());
}

void clear_failure(const std::string& dir) {
    std::error_code ec;
    fs::remove(dir + "/FAILED", ec);
}

std::vector<Trajectory> load_stage_trajectories(const PipelineConfig& cfg) {
    const std::string path =
        cfg.use_synth ? cfg.out_dir + "/synth/trajectories.csv" : cfg.input_csv;
    return parse_trajectories(path).trajectories;
}

void write_predictions_csv(const std::string& path, const ProbTensor& probs,
                           std::span<const int> pred, std::span<const int> truth,
                           std::span<const int> cell_ids) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "cell_id,slot,p0,p1,p2,pred,true\n";
    out.precision(12);
    for (std::size_t i = 0; i < probs.rows.size(); ++i) {
        const auto [cell_row, slot] = probs.keys[i];
        out << cell_ids[cell_row] << ',' << slot << ',' << probs.rows[i][0] << ','
            << probs.rows[i][1] << ',' << probs.rows[i][2] << ',' << pred[i] << ',' << truth[i]
            << '\n';
    }
}

struct PredictionsFile {
    ProbTensor probs;  // keys hold (cell_row, slot)
    std::vector<int> pred;
    std::vector<int> truth;
};

PredictionsFile read_predictions_csv(const std::string& path,
                                     const std::unordered_map<int, int>& cell_to_row) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::getline(in, line);
    PredictionsFile pf;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 7) throw std::runtime_error("bad predictions row in " + path);
        pf.probs.keys.emplace_back(cell_to_row.at(std::stoi(f[0])), std::stoi(f[1]));
        pf.probs.rows.push_back({std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
        pf.pred.push_back(std::stoi(f[5]));
        pf.truth.push_back(std::stoi(f[6]));
    }
    return pf;
}

ExperimentData load_experiment(const PipelineConfig& cfg) {
    const std::string fdir = cfg.out_dir + "/features";
    ExperimentData data;
    GridSidecar sc = read_grid_sidecar(fdir + "/sidecar.json");
    data.grid = sc.grid;
    data.cell_ids = sc.cell_ids;
    data.medium_bound = sc.medium_bound;
    data.tau_keep = sc.tau_keep;

    data.train_set = read_sampleset(fdir + "/samples_train.bin");
    data.test_set = read_sampleset(fdir + "/samples_test.bin");

    const int n = static_cast<int>(sc.cell_ids.size());
    data.adj.n = n;
    data.adj.a.assign(static_cast<std::size_t>(n) * n, 0);
    {
        std::ifstream in(fdir + "/adjacency.csv");
        if (!in) throw std::runtime_error("cannot open " + fdir + "/adjacency.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            int i, jj, v;
            if (std::sscanf(line.c_str(), "%d,%d,%d", &i, &jj, &v) == 3 && v)
                data.adj.set(i, jj);
        }
    }
    data.sem.n = n;
    data.sem.radius = cfg.dtw_radius;
    data.sem.d.assign(static_cast<std::size_t>(n) * n, 0.0);
    {
        std::ifstream in(fdir + "/semantic.csv");
        if (!in) throw std::runtime_error("cannot open " + fdir + "/semantic.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            int i, jj;
            double v;
            if (std::sscanf(line.c_str(), "%d,%d,%lf", &i, &jj, &v) == 3)
                data.sem.d[static_cast<std::size_t>(i) * n + jj] = v;
        }
    }
    return data;
}

}  // namespace

void stage_synth(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "synth");
    clear_failure(dir);
    try {
        SynthResult res = generate(cfg.world);
        write_trajectories_csv(dir + "/trajectories.csv", res.trajectories);
        write_groundtruth_json(dir + "/groundtruth.json", res.truth);
        write_manifest(dir, "synth", {}, cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "synth", e);
    }
}

void stage_ingest(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "ingest");
    clear_failure(dir);
    try {
        const std::string input =
            cfg.use_synth ? cfg.out_dir + "/synth/trajectories.csv" : cfg.input_csv;
        ParseResult parsed = parse_trajectories(input);
        std::vector<StayPoint> sps;
        for (const auto& traj : parsed.trajectories) {
            auto one = detect_stay_points(traj, cfg.staypoint);
            sps.insert(sps.end(), one.begin(), one.end());
        }
        write_staypoints_csv(dir + "/staypoints.csv", sps);
        nlohmann::json rep;
        rep["total_rows"] = parsed.total_rows;
        rep["rejected_rows"] = parsed.rejects.size();
        auto& rr = rep["rejects"] = nlohmann::json::array();
        for (std::size_t i = 0; i < parsed.rejects.size() && i < 100; ++i)
            rr.push_back({{"line", parsed.rejects[i].line_no}, {"reason", parsed.rejects[i].reason}});
        rep["staypoints"] = sps.size();
        std::ofstream out(dir + "/parse_report.json");
        out << rep.dump(2) << '\n';
        write_manifest(dir, "ingest", {input}, cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "ingest", e);
    }
}

void stage_features(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "features");
    clear_failure(dir);
    try {
        auto trajectories = load_stage_trajectories(cfg);
        auto sps = read_staypoints_csv(cfg.out_dir + "/ingest/staypoints.csv");
        ExperimentData data = prepare_experiment(cfg, trajectories, sps);
        write_tensor_csv(dir + "/activity.csv", data.activity);
        write_class_csv(dir + "/classes.csv", data.classes);
        write_grid_sidecar(dir + "/sidecar.json", data.grid, data.activity, data.medium_bound,
                           data.tau_keep);
        write_adjacency_csv(dir + "/adjacency.csv", data.adj);
        write_semantic_csv(dir + "/semantic.csv", data.sem);
        write_sampleset(dir + "/samples_train.bin", data.train_set);
        write_sampleset(dir + "/samples_test.bin", data.test_set);
        write_manifest(dir, "features",
                       {cfg.out_dir + "/ingest/staypoints.csv"}, cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "features", e);
    }
}

void stage_train(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "train");
    clear_failure(dir);
    try {
        ExperimentData data = load_experiment(cfg);
        auto grid = train_grid(data, cfg);
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
            for (std::size_t m = 0; m < kModelOrder.size(); ++m) {
                const std::string base =
                    dir + "/model_" + kModelOrder[m] + "_seed" + std::to_string(cfg.seeds[s]);
                grid[s][m].model->params().save(base + ".bin", base + ".json",
                                                job_seed(cfg.seeds[s], m),
                                                grid[s][m].history.best_epoch);
                write_history_csv(dir + "/history_" + kModelOrder[m] + "_seed" +
                                      std::to_string(cfg.seeds[s]) + ".csv",
                                  grid[s][m].history);
            }
        write_manifest(dir, "train",
                       {cfg.out_dir + "/features/samples_train.bin",
                        cfg.out_dir + "/features/adjacency.csv",
                        cfg.out_dir + "/features/semantic.csv"},
                       cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "train", e);
    }
}

void stage_predict(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "predict");
    clear_failure(dir);
    try {
        ExperimentData data = load_experiment(cfg);
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<ProbTensor> per_model;
            for (std::size_t m = 0; m < kModelOrder.size(); ++m) {
                auto model = instantiate(cfg, data, kModelOrder[m], job_seed(seed, m));
                const std::string base =
                    cfg.out_dir + "/train/model_" + kModelOrder[m] + "_seed" + std::to_string(seed);
                model->params().load(base + ".bin", base + ".json");
                ProbTensor probs = predict(*model, data.test_set);
                std::vector<int> pred = predict_classes(probs);
                std::vector<int> truth = truth_from_keys(data.test_set, probs);
                write_predictions_csv(dir + "/probs_" + kModelOrder[m] + "_seed" +
                                          std::to_string(seed) + ".csv",
                                      probs, pred, truth, data.cell_ids);
                per_model.push_back(std::move(probs));
            }
            ProbTensor fused = soft_vote(per_model, cfg.ensemble);
            std::vector<int> pred = predict_classes(fused);
            std::vector<int> truth = truth_from_keys(data.test_set, fused);
            write_predictions_csv(dir + "/predictions_seed" + std::to_string(seed) + ".csv", fused,
                                  pred, truth, data.cell_ids);
        }
        write_manifest(dir, "predict", {cfg.out_dir + "/features/samples_test.bin"}, cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "predict", e);
    }
}

void stage_evaluate(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "evaluate");
    clear_failure(dir);
    try {
        ExperimentData data = load_experiment(cfg);
        std::unordered_map<int, int> cell_to_row;
        for (std::size_t i = 0; i < data.cell_ids.size(); ++i)
            cell_to_row[data.cell_ids[i]] = static_cast<int>(i);

        std::vector<SeedOutcome> outcomes;
        for (std::uint64_t seed : cfg.seeds) {
            SeedOutcome oc;
            oc.seed = seed;
            for (const auto& name : kModelOrder) {
                PredictionsFile pf = read_predictions_csv(
                    cfg.out_dir + "/predict/probs_" + name + "_seed" + std::to_string(seed) + ".csv",
                    cell_to_row);
                oc.model_strict[name] = prf(confusion_matrix(pf.pred, pf.truth));
            }
            PredictionsFile fused = read_predictions_csv(
                cfg.out_dir + "/predict/predictions_seed" + std::to_string(seed) + ".csv",
                cell_to_row);
            oc.fused = std::move(fused.probs);
            oc.pred = std::move(fused.pred);
            oc.truth = std::move(fused.truth);
            oc.ensemble_strict = prf(confusion_matrix(oc.pred, oc.truth));
            oc.ensemble_relaxed =
                relaxed_high_activity(oc.pred, oc.truth, oc.fused.keys, data.grid, data.cell_ids);
            write_confusion_csv(dir + "/confusion_seed" + std::to_string(seed) + ".csv",
                                confusion_matrix(oc.pred, oc.truth));
            outcomes.push_back(std::move(oc));
        }
        nlohmann::json metrics = build_metrics_json(cfg, outcomes, majority_baseline(data));
        std::ofstream out(dir + "/metrics.json");
        if (!out) throw std::runtime_error("cannot write metrics.json");
        out << metrics.dump(2) << '\n';
        write_manifest(dir, "evaluate",
                       {cfg.out_dir + "/predict/predictions_seed" +
                        std::to_string(cfg.seeds.front()) + ".csv"},
                       cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "evaluate", e);
    }
}

void stage_report(const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, "report");
    clear_failure(dir);
    try {
        ExperimentData data = load_experiment(cfg);
        std::unordered_map<int, int> cell_to_row;
        for (std::size_t i = 0; i < data.cell_ids.size(); ++i)
            cell_to_row[data.cell_ids[i]] = static_cast<int>(i);
        PredictionsFile fused = read_predictions_csv(
            cfg.out_dir + "/predict/predictions_seed" + std::to_string(cfg.seeds.front()) + ".csv",
            cell_to_row);
        export_geojson(dir + "/predictions.geojson", data.grid, data.cell_ids, fused.probs,
                       fused.pred, fused.truth);

        std::ifstream mj(cfg.out_dir + "/evaluate/metrics.json");
        nlohmann::json metrics = nlohmann::json::parse(mj);
        std::ostringstream summary;
        summary << "truckcast run summary\n";
        summary << "  horizon: " << metrics.at("horizon") << "\n";
        summary << "  seeds: " << metrics.at("seeds").size() << "\n";
        if (metrics.contains("aggregate"))
            summary << "  ensemble macro F1 (mean over seeds): "
                    << metrics.at("aggregate").at("ensemble").at("macro_f1") << "\n";
        else
            summary << "  ensemble macro F1: "
                    << metrics.at("per_seed")[0].at("ensemble").at("macro_f1") << "\n";
        std::ofstream out(dir + "/summary.txt");
        out << summary.str();
        std::cout << summary.str();
        write_manifest(dir, "report", {cfg.out_dir + "/evaluate/metrics.json"}, cfg);
    } catch (const std::exception& e) {
        fail_stage(dir, "report", e);
    }
}

void run_pipeline(const PipelineConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream cj(cfg.out_dir + "/config.json");
        cj << config_to_json(cfg).dump(2) << '\n';
    }
    if (cfg.use_synth) stage_synth(cfg);
    stage_ingest(cfg);
    stage_features(cfg);
    stage_train(cfg);
    stage_predict(cfg);
    stage_evaluate(cfg);
    stage_report(cfg);
}

}  // namespace truckcast
