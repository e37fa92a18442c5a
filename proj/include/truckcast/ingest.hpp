#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace truckcast {

struct TrajectoryPoint {
    std::int64_t t = 0;  // epoch seconds, UTC
    double lat = 0.0;
    double lon = 0.0;
};

/// One truck's points, sorted by timestamp (stable on file order for ties).
struct Trajectory {
    std::string truck_id;
    std::vector<TrajectoryPoint> points;
};

struct StayPoint {
    std::string truck_id;
    std::int64_t t_start = 0;
    std::int64_t t_end = 0;
    double anchor_lat = 0.0;  // first member point
    double anchor_lon = 0.0;
    double centroid_lat = 0.0;
    double centroid_lon = 0.0;
    int n_points = 0;
};

struct RejectedRow {
    std::size_t line_no = 0;  // 1-based, header is line 1
    std::string reason;
};

struct ParseResult {
    std::vector<Trajectory> trajectories;  // sorted by truck_id
    std::vector<RejectedRow> rejects;
    std::size_t total_rows = 0;  // data rows seen (valid + rejected)
};

/// Parses a trajectory CSV with header `truck_id,timestamp,lat,lon`.
/// Timestamps are epoch seconds or ISO-8601 with zone. Malformed rows are
/// recorded; more than 10% malformed is a hard failure listing row numbers.
ParseResult parse_trajectories(const std::string& path);

struct StayPointParams {
    double delta_m = 200.0;       // spatial radius around the anchor
    std::int64_t theta_s = 600;   // minimum dwell duration
    std::int64_t max_gap_s = 1800;  // gap splitting candidate windows
};

/// Anchor-based forward scan: extend j while every point stays within
/// delta of the anchor and consecutive gaps stay below max_gap; emit the
/// window when it spans at least theta, then resume past it.
std::vector<StayPoint> detect_stay_points(const Trajectory& traj, const StayPointParams& params);

void write_staypoints_csv(const std::string& path, const std::vector<StayPoint>& sps);
std::vector<StayPoint> read_staypoints_csv(const std::string& path);

}  // namespace truckcast
