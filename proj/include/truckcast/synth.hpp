#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "truckcast/gridding.hpp"
#include "truckcast/ingest.hpp"

namespace truckcast {

struct Site {
    double lat = 0.0;
    double lon = 0.0;
    double weight = 1.0;  // attraction
};

struct WorldConfig {
    BBox bbox;
    int n_trucks = 38;
    std::vector<Site> sites;
    double dwell_mean_s = 2400.0;
    double dwell_min_s = 660.0;
    double trip_speed_mps = 10.0;
    std::array<double, 24> daily{};   // work-acceptance intensity per hour, in [0, 1]
    std::array<double, 7> weekly{};   // near-flat by default: trucks run all week
    int duration_days = 14;
    std::int64_t t0 = 345600;         // 1970-01-05 Monday 00:00 UTC
    std::uint64_t seed = 7;
    std::int64_t point_interval_s = 30;
    double jitter_m = 20.0;
    std::int64_t idle_step_s = 2400;  // silent re-decision step; above the gap split
    double depart_m = 600.0;          // post-dwell staging distance
};

WorldConfig default_world();

struct PlantedDwell {
    int truck = 0;
    int site = 0;
    std::int64_t t_arrive = 0;
    std::int64_t t_depart = 0;
};

struct GroundTruth {
    std::vector<PlantedDwell> dwells;
    std::int64_t slot_len = 1800;
    int n_slots = 0;
    std::vector<std::vector<int>> site_slot_counts;  // dwells overlapping [site][slot]
    std::vector<double> slot_intensity;              // planted profile value per slot
};

struct SynthResult {
    std::vector<Trajectory> trajectories;  // ordered by truck, then time
    GroundTruth truth;
};

/// Seed-deterministic generator: each truck cycles between weighted site
/// choices, straight-line travel with bounded jitter, a planted dwell, and a
/// short staging departure; idle periods are silent and longer than the
/// detector's gap split, so every planted dwell maps to one stay point.
SynthResult generate(const WorldConfig& cfg);

struct ImbalanceProfile {
    double zero_fraction = 0.0;     // expected share of zero cell-slots over site cells
    std::array<double, 3> class_mix{};  // Poisson-approximated class shares
};

/// Analytic expectation used to tune fixtures toward the target skew.
ImbalanceProfile imbalance_profile(const WorldConfig& cfg, int medium_bound = 4);

void write_trajectories_csv(const std::string& path, const std::vector<Trajectory>& trajectories);
void write_groundtruth_json(const std::string& path, const GroundTruth& truth);

}  // namespace truckcast
