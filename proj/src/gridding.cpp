#include "truckcast/gridding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "truckcast/geo.hpp"
#include "truckcast/timeutil.hpp"

namespace truckcast {

bool GridSpec::moore_neighbors(int cell_a, int cell_b) const {
    if (cell_a == cell_b) return false;
    const int dr = std::abs(row_of(cell_a) - row_of(cell_b));
    const int dc = std::abs(col_of(cell_a) - col_of(cell_b));
    return dr <= 1 && dc <= 1;
}

void GridSpec::cell_center(int cell, double& lat, double& lon) const {
    const double mlat = kMetersPerDegLat;
    const double mlon = meters_per_deg_lon(ref_lat);
    lat = origin_lat + (row_of(cell) + 0.5) * cell_size / mlat;
    lon = origin_lon + (col_of(cell) + 0.5) * cell_size / mlon;
}

void GridSpec::cell_corner(int row, int col, double& lat, double& lon) const {
    lat = origin_lat + row * cell_size / kMetersPerDegLat;
    lon = origin_lon + col * cell_size / meters_per_deg_lon(ref_lat);
}

GridSpec build_grid(const BBox& bbox, double cell_size_m) {
    if (cell_size_m <= 0.0) throw std::invalid_argument("cell_size must be positive");
    if (!(bbox.lat_max > bbox.lat_min))
        throw std::invalid_argument("degenerate bbox: lat extent is empty");
    if (!(bbox.lon_max > bbox.lon_min))
        throw std::invalid_argument(bbox.lon_max < bbox.lon_min
                                        ? "bbox spans the antimeridian; not supported"
                                        : "degenerate bbox: lon extent is empty");
    GridSpec g;
    g.origin_lat = bbox.lat_min;
    g.origin_lon = bbox.lon_min;
    g.cell_size = cell_size_m;
    g.ref_lat = 0.5 * (bbox.lat_min + bbox.lat_max);
    const double h_m = (bbox.lat_max - bbox.lat_min) * kMetersPerDegLat;
    const double w_m = (bbox.lon_max - bbox.lon_min) * meters_per_deg_lon(g.ref_lat);
    g.n_rows = std::max(1, static_cast<int>(std::ceil(h_m / cell_size_m - 1e-9)));
    g.n_cols = std::max(1, static_cast<int>(std::ceil(w_m / cell_size_m - 1e-9)));
    return g;
}

std::optional<int> locate(const GridSpec& grid, double lat, double lon) {
    const double y = (lat - grid.origin_lat) * kMetersPerDegLat;
    const double x = (lon - grid.origin_lon) * meters_per_deg_lon(grid.ref_lat);
    const int row = static_cast<int>(std::floor(y / grid.cell_size));
    const int col = static_cast<int>(std::floor(x / grid.cell_size));
    if (row < 0 || row >= grid.n_rows || col < 0 || col >= grid.n_cols) return std::nullopt;
    return grid.cell_at(row, col);
}

ActivityTensor count_activity(const std::vector<StayPoint>& staypoints, const GridSpec& grid,
                              std::int64_t slot_len, std::int64_t t0, int horizon_slots,
                              CountStats* stats) {
    if (horizon_slots < 1) throw std::invalid_argument("horizon_slots must be >= 1");
    if (slot_len <= 0) throw std::invalid_argument("slot_len must be positive");

    ActivityTensor t;
    t.slot_len = slot_len;
    t.t0 = t0;
    t.n_slots = horizon_slots;
    t.cell_ids.resize(grid.n_cells());
    std::iota(t.cell_ids.begin(), t.cell_ids.end(), 0);
    t.counts.assign(static_cast<std::size_t>(grid.n_cells()) * horizon_slots, 0);

    std::unordered_map<std::string, int> truck_index;
    std::unordered_set<std::uint64_t> seen;  // truck x cell x slot cap
    CountStats local;
    for (const auto& sp : staypoints) {
        auto cell = locate(grid, sp.anchor_lat, sp.anchor_lon);
        if (!cell) {
            ++local.dropped_outside_grid;
            continue;
        }
        const std::int64_t first = floor_div(sp.t_start - t0, slot_len);
        const std::int64_t last = floor_div(sp.t_end - t0, slot_len);
        if (last < 0 || first >= horizon_slots) {
            ++local.dropped_outside_time;
            continue;
        }
        const int s0 = static_cast<int>(std::max<std::int64_t>(first, 0));
        const int s1 = static_cast<int>(std::min<std::int64_t>(last, horizon_slots - 1));
        auto [it, inserted] = truck_index.emplace(sp.truck_id, static_cast<int>(truck_index.size()));
        const std::uint64_t truck = static_cast<std::uint64_t>(it->second);
        const std::uint64_t n_cells = static_cast<std::uint64_t>(grid.n_cells());
        const std::uint64_t n_slots = static_cast<std::uint64_t>(horizon_slots);
        for (int s = s0; s <= s1; ++s) {
            const std::uint64_t key =
                (truck * n_cells + static_cast<std::uint64_t>(*cell)) * n_slots +
                static_cast<std::uint64_t>(s);
            if (seen.insert(key).second) ++t.at(*cell, s);
        }
    }
    if (stats) *stats = local;
    return t;
}

DownsampleResult downsample_grids(const ActivityTensor& tensor, double keep_fraction) {
    if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
        throw std::invalid_argument("keep_fraction must be in (0, 1]");
    struct CellMean {
        int row;
        double mean;
    };
    std::vector<CellMean> nonzero;
    for (std::size_t r = 0; r < tensor.n_cells(); ++r) {
        long long sum = 0;
        for (int s = 0; s < tensor.n_slots; ++s) sum += tensor.at(static_cast<int>(r), s);
        if (sum > 0)
            nonzero.push_back({static_cast<int>(r), static_cast<double>(sum) / tensor.n_slots});
    }
    if (nonzero.empty()) throw std::runtime_error("downsample_grids: nothing to retain");

    std::sort(nonzero.begin(), nonzero.end(), [](const CellMean& a, const CellMean& b) {
        if (a.mean != b.mean) return a.mean > b.mean;
        return a.row < b.row;
    });
    std::size_t n_keep = static_cast<std::size_t>(keep_fraction * static_cast<double>(nonzero.size()));
    n_keep = std::max<std::size_t>(1, std::min(n_keep, nonzero.size()));
    const double tau = nonzero[n_keep - 1].mean;
    while (n_keep < nonzero.size() && nonzero[n_keep].mean == tau) ++n_keep;  // keep ties

    DownsampleResult res;
    res.tau_keep = tau;
    for (std::size_t i = 0; i < n_keep; ++i) res.retained_rows.push_back(nonzero[i].row);
    std::sort(res.retained_rows.begin(), res.retained_rows.end());
    return res;
}

ActivityTensor select_cells(const ActivityTensor& tensor, const std::vector<int>& rows) {
    ActivityTensor out;
    out.slot_len = tensor.slot_len;
    out.t0 = tensor.t0;
    out.n_slots = tensor.n_slots;
    out.cell_ids.reserve(rows.size());
    out.counts.reserve(rows.size() * static_cast<std::size_t>(tensor.n_slots));
    for (int r : rows) {
        out.cell_ids.push_back(tensor.cell_ids.at(static_cast<std::size_t>(r)));
        for (int s = 0; s < tensor.n_slots; ++s) out.counts.push_back(tensor.at(r, s));
    }
    return out;
}

int derive_class_thresholds(const ActivityTensor& tensor, double top_fraction) {
    if (!(top_fraction > 0.0) || !(top_fraction < 1.0))
        throw std::invalid_argument("top_fraction must be in (0, 1)");
    std::vector<int> pos;
    for (int c : tensor.counts)
        if (c > 0) pos.push_back(c);
    if (pos.empty()) throw std::runtime_error("derive_class_thresholds: no positive counts");
    const int max_v = *std::max_element(pos.begin(), pos.end());
    const double n = static_cast<double>(pos.size());
    for (int b = 1; b <= max_v; ++b) {
        const auto gt = std::count_if(pos.begin(), pos.end(), [b](int v) { return v > b; });
        if (static_cast<double>(gt) / n <= top_fraction) return b;
    }
    return max_v;
}

int label_of(int count, int medium_bound) {
    if (count == 0) return 0;
    return count <= medium_bound ? 1 : 2;
}

ClassTensor label_classes(const ActivityTensor& tensor, int medium_bound) {
    if (medium_bound < 1) throw std::invalid_argument("medium_bound must be >= 1");
    ClassTensor ct;
    ct.cell_ids = tensor.cell_ids;
    ct.slot_len = tensor.slot_len;
    ct.t0 = tensor.t0;
    ct.n_slots = tensor.n_slots;
    ct.medium_bound = medium_bound;
    ct.labels.resize(tensor.counts.size());
    for (std::size_t i = 0; i < tensor.counts.size(); ++i)
        ct.labels[i] = static_cast<std::uint8_t>(label_of(tensor.counts[i], medium_bound));
    return ct;
}

void write_tensor_csv(const std::string& path, const ActivityTensor& t) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "cell_id,slot,value\n";
    for (std::size_t r = 0; r < t.n_cells(); ++r)
        for (int s = 0; s < t.n_slots; ++s)
            out << t.cell_ids[r] << ',' << s << ',' << t.at(static_cast<int>(r), s) << '\n';
}

void write_class_csv(const std::string& path, const ClassTensor& t) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "cell_id,slot,value\n";
    for (std::size_t r = 0; r < t.n_cells(); ++r)
        for (int s = 0; s < t.n_slots; ++s)
            out << t.cell_ids[r] << ',' << s << ',' << int(t.at(static_cast<int>(r), s)) << '\n';
}

GridSidecar read_grid_sidecar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    GridSidecar sc;
    const auto& g = j.at("grid");
    sc.grid.origin_lat = g.at("origin_lat").get<double>();
    sc.grid.origin_lon = g.at("origin_lon").get<double>();
    sc.grid.cell_size = g.at("cell_size_m").get<double>();
    sc.grid.n_rows = g.at("n_rows").get<int>();
    sc.grid.n_cols = g.at("n_cols").get<int>();
    sc.grid.ref_lat = g.at("ref_lat").get<double>();
    sc.cell_ids = j.at("cell_ids").get<std::vector<int>>();
    sc.t0 = j.at("t0").get<std::int64_t>();
    sc.slot_len = j.at("slot_len_s").get<std::int64_t>();
    sc.n_slots = j.at("n_slots").get<int>();
    sc.medium_bound = j.at("thresholds").at("medium_bound").get<int>();
    sc.tau_keep = j.at("tau_keep").get<double>();
    return sc;
}

void write_grid_sidecar(const std::string& path, const GridSpec& grid, const ActivityTensor& t,
                        int medium_bound, double tau_keep) {
    nlohmann::json j;
    j["grid"] = {{"origin_lat", grid.origin_lat}, {"origin_lon", grid.origin_lon},
                 {"cell_size_m", grid.cell_size},  {"n_rows", grid.n_rows},
                 {"n_cols", grid.n_cols},          {"ref_lat", grid.ref_lat}};
    j["t0"] = t.t0;
    j["slot_len_s"] = t.slot_len;
    j["n_slots"] = t.n_slots;
    j["cell_ids"] = t.cell_ids;
    j["thresholds"] = {{"zero_bound", 0}, {"medium_bound", medium_bound}};
    j["tau_keep"] = tau_keep;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace truckcast
