// Independent brute-force oracles used by the unit and acceptance suites.
// These deliberately avoid the library's incremental implementations.
#pragma once

#include <random>
#include <vector>

#include "truckcast/features.hpp"
#include "truckcast/geo.hpp"
#include "truckcast/ingest.hpp"

namespace truckcast::testing {

/// O(n^2) scan: the maximal window is recomputed from scratch for every
/// anchor, then the emit/resume rule is replayed over the window table.
inline std::vector<StayPoint> oracle_stay_points(const Trajectory& traj,
                                                 const StayPointParams& p) {
    const auto& pts = traj.points;
    const std::size_t n = pts.size();
    std::vector<std::size_t> maxj(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = i;
        for (std::size_t m = i + 1; m < n; ++m) {
            if (pts[m].t - pts[m - 1].t > p.max_gap_s) break;
            if (haversine(pts[i].lat, pts[i].lon, pts[m].lat, pts[m].lon) > p.delta_m) break;
            j = m;
        }
        maxj[i] = j;
    }
    std::vector<StayPoint> out;
    std::size_t i = 0;
    while (i < n) {
        const std::size_t j = maxj[i];
        if (j > i && pts[j].t - pts[i].t >= p.theta_s) {
            StayPoint sp;
            sp.truck_id = traj.truck_id;
            sp.t_start = pts[i].t;
            sp.t_end = pts[j].t;
            sp.anchor_lat = pts[i].lat;
            sp.anchor_lon = pts[i].lon;
            double slat = 0.0, slon = 0.0;
            for (std::size_t m = i; m <= j; ++m) {
                slat += pts[m].lat;
                slon += pts[m].lon;
            }
            sp.n_points = static_cast<int>(j - i + 1);
            sp.centroid_lat = slat / sp.n_points;
            sp.centroid_lon = slon / sp.n_points;
            out.push_back(std::move(sp));
            i = j + 1;
        } else {
            ++i;
        }
    }
    return out;
}

inline bool same_staypoints(const std::vector<StayPoint>& a, const std::vector<StayPoint>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].t_start != b[i].t_start || a[i].t_end != b[i].t_end ||
            a[i].n_points != b[i].n_points || a[i].anchor_lat != b[i].anchor_lat ||
            a[i].anchor_lon != b[i].anchor_lon)
            return false;
    }
    return true;
}

/// Random walk with dwell clusters, long jumps and occasional outages.
inline Trajectory random_walk(std::mt19937_64& rng, std::size_t n_points, double lat0 = 30.6,
                              double lon0 = 104.0) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Trajectory tr;
    tr.truck_id = "walker";
    double lat = lat0, lon = lon0;
    std::int64_t t = 1000000;
    for (std::size_t i = 0; i < n_points; ++i) {
        tr.points.push_back({t, lat, lon});
        const double mode = uni(rng);
        double step_m;
        if (mode < 0.65)
            step_m = 40.0 * uni(rng);  // dwell-ish jitter around delta/5
        else if (mode < 0.92)
            step_m = 500.0 * uni(rng);  // drive
        else
            step_m = 3000.0 * uni(rng);  // long jump
        const double ang = 2.0 * kPi * uni(rng);
        lat += step_m * std::sin(ang) / kMetersPerDegLat;
        lon += step_m * std::cos(ang) / meters_per_deg_lon(lat);
        if (uni(rng) < 0.01)
            t += 1800 + static_cast<std::int64_t>(uni(rng) * 3600.0);  // outage
        else
            t += 15 + static_cast<std::int64_t>(uni(rng) * 45.0);
    }
    return tr;
}

/// Enumerates all consecutive point pairs and applies the Moore filter.
inline AdjacencyMatrix oracle_adjacency(const std::vector<Trajectory>& trajectories,
                                        const GridSpec& grid,
                                        const std::vector<int>& retained) {
    AdjacencyMatrix adj;
    adj.n = static_cast<int>(retained.size());
    adj.a.assign(static_cast<std::size_t>(adj.n) * adj.n, 0);
    auto row_of = [&](int cell) {
        for (std::size_t r = 0; r < retained.size(); ++r)
            if (retained[r] == cell) return static_cast<int>(r);
        return -1;
    };
    for (const auto& tr : trajectories)
        for (std::size_t i = 0; i + 1 < tr.points.size(); ++i) {
            auto a = locate(grid, tr.points[i].lat, tr.points[i].lon);
            auto b = locate(grid, tr.points[i + 1].lat, tr.points[i + 1].lon);
            if (!a || !b || *a == *b) continue;
            const int dr = std::abs(grid.row_of(*a) - grid.row_of(*b));
            const int dc = std::abs(grid.col_of(*a) - grid.col_of(*b));
            if (dr > 1 || dc > 1) continue;
            const int ra = row_of(*a), rb = row_of(*b);
            if (ra < 0 || rb < 0) continue;
            adj.set(ra, rb);
            adj.set(rb, ra);
        }
    return adj;
}

}  // namespace truckcast::testing
