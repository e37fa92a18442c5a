#include "truckcast/ingest.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "truckcast/geo.hpp"
#include "truckcast/timeutil.hpp"

namespace truckcast {

namespace {

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    errno = 0;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return errno == 0 && end == s.c_str() + s.size();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

}  // namespace

ParseResult parse_trajectories(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trajectory file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty trajectory file: " + path);
    {
        auto hdr = split_csv_line(line);
        if (hdr.size() < 4 || trim(hdr[0]) != "truck_id" || trim(hdr[1]) != "timestamp" ||
            trim(hdr[2]) != "lat" || trim(hdr[3]) != "lon")
            throw std::runtime_error("unexpected header in " + path +
                                     " (want truck_id,timestamp,lat,lon)");
    }

    struct Row {
        std::size_t pos;
        TrajectoryPoint p;
    };
    std::map<std::string, std::vector<Row>> groups;
    ParseResult res;
    std::size_t line_no = 1;
    std::size_t pos = 0;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        ++res.total_rows;
        auto f = split_csv_line(line);
        if (f.size() != 4) {
            res.rejects.push_back({line_no, "expected 4 fields, got " + std::to_string(f.size())});
            continue;
        }
        const std::string id = trim(f[0]);
        if (id.empty()) {
            res.rejects.push_back({line_no, "empty truck_id"});
            continue;
        }
        auto ts = parse_timestamp(trim(f[1]));
        if (!ts) {
            res.rejects.push_back({line_no, "bad timestamp '" + trim(f[1]) + "'"});
            continue;
        }
        double lat, lon;
        if (!parse_double(trim(f[2]), lat) || !parse_double(trim(f[3]), lon)) {
            res.rejects.push_back({line_no, "bad coordinate"});
            continue;
        }
        if (lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) {
            res.rejects.push_back({line_no, "coordinate out of range"});
            continue;
        }
        groups[id].push_back({pos++, TrajectoryPoint{*ts, lat, lon}});
    }

    if (res.total_rows > 0 &&
        static_cast<double>(res.rejects.size()) > 0.10 * static_cast<double>(res.total_rows)) {
        std::ostringstream msg;
        msg << res.rejects.size() << "/" << res.total_rows << " malformed rows in " << path
            << "; first offending lines:";
        for (std::size_t i = 0; i < res.rejects.size() && i < 20; ++i)
            msg << " " << res.rejects[i].line_no;
        throw std::runtime_error(msg.str());
    }

    res.trajectories.reserve(groups.size());
    for (auto& [id, rows] : groups) {
        // Stable on file position for duplicate timestamps.
        std::stable_sort(rows.begin(), rows.end(),
                         [](const Row& a, const Row& b) { return a.p.t < b.p.t; });
        Trajectory tr;
        tr.truck_id = id;
        tr.points.reserve(rows.size());
        for (const auto& r : rows) tr.points.push_back(r.p);
        res.trajectories.push_back(std::move(tr));
    }
    return res;
}

std::vector<StayPoint> detect_stay_points(const Trajectory& traj, const StayPointParams& params) {
    const auto& pts = traj.points;
    std::vector<StayPoint> out;
    const std::size_t n = pts.size();
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pts[j + 1].t - pts[j].t <= params.max_gap_s &&
               haversine(pts[i].lat, pts[i].lon, pts[j + 1].lat, pts[j + 1].lon) <= params.delta_m)
            ++j;
        if (j > i && pts[j].t - pts[i].t >= params.theta_s) {
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

void write_staypoints_csv(const std::string& path, const std::vector<StayPoint>& sps) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "truck_id,t_start,t_end,anchor_lat,anchor_lon,centroid_lat,centroid_lon,n_points\n";
    out.precision(9);
    out << std::fixed;
    for (const auto& s : sps) {
        out << s.truck_id << ',' << s.t_start << ',' << s.t_end << ',' << s.anchor_lat << ','
            << s.anchor_lon << ',' << s.centroid_lat << ',' << s.centroid_lon << ',' << s.n_points
            << '\n';
    }
}

std::vector<StayPoint> read_staypoints_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<StayPoint> out;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto f = split_csv_line(line);
        if (f.size() != 8) throw std::runtime_error("bad staypoint row in " + path);
        StayPoint s;
        s.truck_id = f[0];
        s.t_start = std::stoll(f[1]);
        s.t_end = std::stoll(f[2]);
        s.anchor_lat = std::stod(f[3]);
        s.anchor_lon = std::stod(f[4]);
        s.centroid_lat = std::stod(f[5]);
        s.centroid_lon = std::stod(f[6]);
        s.n_points = std::stoi(f[7]);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace truckcast
