#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "truckcast/gridding.hpp"

namespace truckcast {

struct ConfusionMatrix {
    std::array<std::array<long long, 3>, 3> counts{};  // [true][pred]

    long long at(int truth, int pred) const { return counts[truth][pred]; }
    long long total() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> pred, std::span<const int> truth);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct MetricsReport {
    std::array<ClassMetrics, 3> per_class{};
    double macro_f1 = 0.0;
    // Cross-seed spread (sample standard deviation, n-1), set by aggregate_seeds.
    bool has_spread = false;
    std::array<ClassMetrics, 3> per_class_std{};
    double macro_f1_std = 0.0;
};

/// Precision/recall/F1 per class with 0/0 defined as 0; macro F1 is the
/// unweighted mean of the three per-class F1 values.
MetricsReport prf(const ConfusionMatrix& cm);

/// Mean and sample standard deviation across seeds.
MetricsReport aggregate_seeds(const std::vector<MetricsReport>& reports);

struct RelaxedMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// One-hop relaxed criterion for the high class, per slot:
///  - a predicted-high cell-slot is correct iff its own cell or any Moore
///    neighbor is truly high at that slot;
///  - a truly-high cell-slot is recalled iff a predicted-high cell exists in
///    its one-hop neighborhood (itself included).
/// Both bounds dominate the strict class-2 metrics. Boundary cells use their
/// truncated neighborhoods.
RelaxedMetrics relaxed_high_activity(std::span<const int> pred, std::span<const int> truth,
                                     std::span<const std::pair<int, int>> keys,
                                     const GridSpec& grid, std::span<const int> cell_ids);

/// Runs one pipeline per horizon with identical seeds (the callback closes
/// over them) and collects the per-horizon reports.
template <typename Report>
std::vector<Report> horizon_sweep(const std::function<Report(int)>& run_one,
                                  std::span<const int> horizons) {
    std::vector<Report> out;
    out.reserve(horizons.size());
    for (int h : horizons) out.push_back(run_one(h));
    return out;
}

void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm);

}  // namespace truckcast
