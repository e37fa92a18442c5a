#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "truckcast/gridding.hpp"
#include "truckcast/ingest.hpp"

namespace truckcast {

/// Binary geographic adjacency over retained cells. Entries are 1 only for
/// Moore-neighbor pairs witnessed by consecutive trajectory points.
struct AdjacencyMatrix {
    int n = 0;
    std::vector<std::uint8_t> a;  // row-major n x n, symmetric, zero diagonal

    std::uint8_t at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }
    void set(int i, int j) { a[static_cast<std::size_t>(i) * n + j] = 1; }
};

/// Pairwise FastDTW costs between per-cell count series.
struct SemanticMatrix {
    int n = 0;
    int radius = 1;
    std::vector<double> d;  // row-major n x n, symmetric, zero diagonal

    double at(int i, int j) const { return d[static_cast<std::size_t>(i) * n + j]; }
};

struct TemporalEncoding {
    int hour = 0;  // 0-23
    int dow = 0;   // Monday = 0 .. Sunday = 6
};

AdjacencyMatrix build_adjacency(const std::vector<Trajectory>& trajectories, const GridSpec& grid,
                                const std::vector<int>& retained_cell_ids, bool* any_edge = nullptr);

SemanticMatrix build_semantic_matrix(const ActivityTensor& tensor, int radius);

TemporalEncoding temporal_encoding(int slot, std::int64_t t0, std::int64_t slot_len,
                                   std::int64_t utc_offset_s = 0);

/// Sliding-window samples over a labeled tensor. A sample for (cell, tau)
/// reads the k slots ending at tau - horizon and predicts the label at tau;
/// samples are enumerated on demand from the stored tensor.
struct SampleSet {
    int k = 12;
    int horizon = 1;
    ClassTensor classes;                 // retained cells only
    std::vector<TemporalEncoding> enc;   // one per slot of `classes`
    std::vector<int> target_slots;       // eligible tau, ascending
    std::vector<int> counts;             // optional raw counts, same layout as labels
    bool has_counts = false;

    std::size_t n_cells() const { return classes.n_cells(); }
    std::size_t n_samples() const { return n_cells() * target_slots.size(); }
    int window_start(int target_slot) const { return target_slot - horizon - k + 1; }
    int count_at(int cell_row, int slot) const {
        return counts[static_cast<std::size_t>(cell_row) * classes.n_slots + slot];
    }
};

/// Pass the matching activity tensor to keep raw counts available as an
/// ablation input.
SampleSet make_windows(const ClassTensor& classes, int k, int horizon,
                       std::int64_t utc_offset_s = 0, const ActivityTensor* raw = nullptr);

struct SplitConfig {
    double train_ratio = 0.8;
    bool chronological = true;  // random split is for ablation parity only
    std::uint64_t seed = 0;
};

/// Chronological split on target slots by default: the earliest train_ratio
/// of slots go to train (round-down, at least one slot per side).
std::pair<SampleSet, SampleSet> split_dataset(const SampleSet& samples, const SplitConfig& cfg);

/// CSV triplets `i,j,value`.
void write_adjacency_csv(const std::string& path, const AdjacencyMatrix& a);
void write_semantic_csv(const std::string& path, const SemanticMatrix& d);

/// Binary records with a JSON header (k, horizon, cell list, slot range).
void write_sampleset(const std::string& path, const SampleSet& s);
SampleSet read_sampleset(const std::string& path);

}  // namespace truckcast
