#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "truckcast/ensemble.hpp"
#include "truckcast/eval.hpp"
#include "truckcast/features.hpp"
#include "truckcast/models.hpp"
#include "truckcast/synth.hpp"

namespace truckcast {

inline constexpr const char* kVersion = "0.1.0";
inline const std::vector<std::string> kModelOrder = {"birnn", "tcn", "stgcn_lite",
                                                     "pdformer_lite"};

struct PipelineConfig {
    std::string out_dir = "runs/default";
    std::vector<std::uint64_t> seeds = {0};
    int jobs = 0;  // 0 = hardware concurrency

    bool use_synth = true;
    WorldConfig world = default_world();
    std::string input_csv;

    StayPointParams staypoint;
    double cell_size_m = 1000.0;
    std::optional<BBox> bbox;       // defaults to the synth world bbox / data extent
    std::int64_t slot_len_s = 1800;
    std::int64_t t0 = -1;           // <0: from the synth world / data
    std::int64_t utc_offset_s = 0;

    bool downsample_enabled = true;
    double keep_fraction = 0.25;
    std::string label_mode = "derive";  // "derive" | "pin"
    double top_fraction = 0.10;
    int medium_bound = 4;               // used when pinned

    int k = 12;
    int horizon = 1;
    int dtw_radius = 1;
    bool input_counts = false;  // ablation: raw counts as model input
    double train_ratio = 0.8;
    bool chronological_split = true;

    std::map<std::string, ModelConfig> models;  // one per kind, keyed by name
    TrainConfig train;
    bool weighted_loss = true;
    EnsembleConfig ensemble;

    PipelineConfig();
};

/// The tuned desk-scale fixture: ~64 grid cells, 14 days, strong daily
/// periodicity, roughly 68% zero cell-slots over the retained cells.
PipelineConfig default_fixture_config();

PipelineConfig load_config(const std::string& path);
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);

/// Everything the modeling stages consume, in memory.
struct ExperimentData {
    GridSpec grid;
    std::vector<int> cell_ids;  // retained grid cell ids, tensor row order
    ActivityTensor activity;    // retained cells
    ClassTensor classes;
    int medium_bound = 4;
    double tau_keep = 0.0;
    AdjacencyMatrix adj;
    SemanticMatrix sem;
    SampleSet train_set;
    SampleSet test_set;
};

ExperimentData prepare_experiment(const PipelineConfig& cfg,
                                  const std::vector<Trajectory>& trajectories,
                                  const std::vector<StayPoint>& staypoints);

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::map<std::string, MetricsReport> model_strict;
    std::map<std::string, ProbTensor> model_probs;
    MetricsReport ensemble_strict;
    RelaxedMetrics ensemble_relaxed;
    ProbTensor fused;
    std::vector<int> pred;
    std::vector<int> truth;
};

/// Trains all four base models for one seed and fuses them.
SeedOutcome run_seed(const ExperimentData& data, const PipelineConfig& cfg, std::uint64_t seed);

/// (seed x model) jobs run concurrently, capped by cfg.jobs.
std::vector<SeedOutcome> run_seeds(const ExperimentData& data, const PipelineConfig& cfg);

/// Majority-class baseline on the test split (majority taken from train).
MetricsReport majority_baseline(const ExperimentData& data);

nlohmann::json metrics_to_json(const MetricsReport& rep);
nlohmann::json build_metrics_json(const PipelineConfig& cfg,
                                  const std::vector<SeedOutcome>& outcomes,
                                  const MetricsReport& baseline);

/// Grid-cell polygons with per-slot prediction properties, lon/lat order,
/// closed rings.
void export_geojson(const std::string& path, const GridSpec& grid,
                    std::span<const int> cell_ids, const ProbTensor& fused,
                    std::span<const int> pred, std::span<const int> truth);

/// FNV-1a 64 content hash, hex.
std::string file_hash(const std::string& path);
void write_manifest(const std::string& dir, const std::string& stage,
                    const std::vector<std::string>& inputs, const PipelineConfig& cfg);

// File-driven stages; `pipeline` chains all of them.
void stage_synth(const PipelineConfig& cfg);
void stage_ingest(const PipelineConfig& cfg);
void stage_features(const PipelineConfig& cfg);
void stage_train(const PipelineConfig& cfg);
void stage_predict(const PipelineConfig& cfg);
void stage_evaluate(const PipelineConfig& cfg);
void stage_report(const PipelineConfig& cfg);
void run_pipeline(const PipelineConfig& cfg);

}  // namespace truckcast
