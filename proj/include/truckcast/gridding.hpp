#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "truckcast/ingest.hpp"

namespace truckcast {

struct BBox {
    double lat_min = 0.0, lon_min = 0.0, lat_max = 0.0, lon_max = 0.0;
};

/// Equirectangular tessellation anchored at the south-west corner.
struct GridSpec {
    double origin_lat = 0.0;
    double origin_lon = 0.0;
    double cell_size = 1000.0;  // meters
    int n_rows = 0;
    int n_cols = 0;
    double ref_lat = 0.0;  // latitude used for meters-per-degree-longitude

    int n_cells() const { return n_rows * n_cols; }
    int row_of(int cell) const { return cell / n_cols; }
    int col_of(int cell) const { return cell % n_cols; }
    int cell_at(int row, int col) const { return row * n_cols + col; }
    bool moore_neighbors(int cell_a, int cell_b) const;
    /// Cell center in degrees.
    void cell_center(int cell, double& lat, double& lon) const;
    /// Corner (lat, lon) of a cell at its (row, col) offset in cells.
    void cell_corner(int row, int col, double& lat, double& lon) const;
};

GridSpec build_grid(const BBox& bbox, double cell_size_m);

/// Grid cell containing (lat, lon), or nullopt when outside the bbox.
/// Boundary points belong to the higher-index cell.
std::optional<int> locate(const GridSpec& grid, double lat, double lon);

/// Stay-point counts per retained cell and time slot.
struct ActivityTensor {
    std::vector<int> cell_ids;     // grid cell id per tensor row
    std::int64_t slot_len = 1800;  // seconds
    std::int64_t t0 = 0;           // start of slot 0
    int n_slots = 0;
    std::vector<int> counts;  // [cell row][slot], row-major

    int& at(int cell_row, int slot) { return counts[static_cast<std::size_t>(cell_row) * n_slots + slot]; }
    int at(int cell_row, int slot) const { return counts[static_cast<std::size_t>(cell_row) * n_slots + slot]; }
    std::size_t n_cells() const { return cell_ids.size(); }
};

struct CountStats {
    std::size_t dropped_outside_time = 0;
    std::size_t dropped_outside_grid = 0;
};

/// Counts each stay point once per overlapped slot, in the cell of its
/// anchor point, capped at one contribution per truck per cell-slot.
ActivityTensor count_activity(const std::vector<StayPoint>& staypoints, const GridSpec& grid,
                              std::int64_t slot_len, std::int64_t t0, int horizon_slots,
                              CountStats* stats = nullptr);

struct DownsampleResult {
    std::vector<int> retained_rows;  // indices into the tensor's cell rows, ascending
    double tau_keep = 0.0;           // realized mean-count threshold
};

/// Drops all-zero cells, then keeps the top keep_fraction of the remaining
/// cells by mean count over all slots (ties at the threshold are kept).
DownsampleResult downsample_grids(const ActivityTensor& tensor, double keep_fraction);

/// Restricts a tensor to a subset of its rows.
ActivityTensor select_cells(const ActivityTensor& tensor, const std::vector<int>& rows);

/// Smallest integer b such that at most top_fraction of the strictly
/// positive counts exceed b.
int derive_class_thresholds(const ActivityTensor& tensor, double top_fraction);

struct ClassTensor {
    std::vector<int> cell_ids;
    std::int64_t slot_len = 1800;
    std::int64_t t0 = 0;
    int n_slots = 0;
    int medium_bound = 4;
    std::vector<std::uint8_t> labels;  // [cell row][slot], values 0/1/2

    std::uint8_t at(int cell_row, int slot) const {
        return labels[static_cast<std::size_t>(cell_row) * n_slots + slot];
    }
    std::size_t n_cells() const { return cell_ids.size(); }
};

/// 0 if v = 0, 1 if 1 <= v <= medium_bound, 2 if v > medium_bound.
int label_of(int count, int medium_bound);
ClassTensor label_classes(const ActivityTensor& tensor, int medium_bound);

/// Long-format CSV `cell_id,slot,value` plus a JSON sidecar with the grid,
/// t0, slot_len and thresholds.
void write_tensor_csv(const std::string& path, const ActivityTensor& t);
void write_class_csv(const std::string& path, const ClassTensor& t);
void write_grid_sidecar(const std::string& path, const GridSpec& grid, const ActivityTensor& t,
                        int medium_bound, double tau_keep);

struct GridSidecar {
    GridSpec grid;
    std::vector<int> cell_ids;
    std::int64_t t0 = 0;
    std::int64_t slot_len = 1800;
    int n_slots = 0;
    int medium_bound = 4;
    double tau_keep = 0.0;
};

GridSidecar read_grid_sidecar(const std::string& path);

}  // namespace truckcast
