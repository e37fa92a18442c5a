#include "truckcast/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "truckcast/geo.hpp"
#include "truckcast/timeutil.hpp"

namespace truckcast {

namespace {

struct LocalFrame {
    // Equirectangular local meters around the bbox reference latitude.
    double ref_lat;
    double m_lat = kMetersPerDegLat;
    double m_lon;

    explicit LocalFrame(const BBox& b)
        : ref_lat(0.5 * (b.lat_min + b.lat_max)), m_lon(meters_per_deg_lon(ref_lat)) {}

    double dist_m(double lat1, double lon1, double lat2, double lon2) const {
        const double dy = (lat2 - lat1) * m_lat;
        const double dx = (lon2 - lon1) * m_lon;
        return std::sqrt(dx * dx + dy * dy);
    }
};

double clampd(double v, double lo, double hi) { return std::max(lo, std::min(hi, v)); }

}  // namespace

WorldConfig default_world() {
    WorldConfig w;
    // 8 km x 8 km box away from the antimeridian and poles; the lon extent is
    // sized with the same reference latitude the grid builder will use.
    w.bbox.lat_min = 30.50;
    w.bbox.lon_min = 104.00;
    w.bbox.lat_max = 30.50 + 8000.0 / kMetersPerDegLat;
    const double ref = 0.5 * (w.bbox.lat_min + w.bbox.lat_max);
    w.bbox.lon_max = 104.00 + 8000.0 / meters_per_deg_lon(ref);

    // Day-shift intensity: silent nights, a morning ramp, full swing 9-16h.
    for (int h = 0; h < 24; ++h) w.daily[h] = 0.0;
    w.daily[7] = 0.15;
    w.daily[8] = 0.5;
    for (int h = 9; h <= 16; ++h) w.daily[h] = 1.0;
    w.daily[17] = 0.35;
    w.daily[18] = 0.05;
    // Slag fleets run all week; keep the weekly profile near flat.
    for (int d = 0; d < 7; ++d) w.weekly[d] = 1.0;
    w.weekly[6] = 0.85;

    LocalFrame f(w.bbox);
    auto site = [&](int row, int col, double weight) {
        Site s;
        s.lat = w.bbox.lat_min + (row + 0.5) * 1000.0 / f.m_lat;
        s.lon = w.bbox.lon_min + (col + 0.5) * 1000.0 / f.m_lon;
        s.weight = weight;
        return s;
    };
    // One dominant construction site, a ring of mid-tier sites around it
    // (adjacent cells exercise the OD adjacency), and a long tail of light
    // ones. The dominant site's peak counts sit well above the mid tier, so
    // the derived class boundary lands under its day-shift cloud.
    w.sites = {
        site(2, 2, 26.0),
        // mid-tier ring
        site(2, 3, 2.2), site(3, 2, 2.1), site(3, 3, 2.0), site(2, 4, 1.9),
        site(1, 2, 1.8), site(4, 3, 1.7), site(5, 5, 1.6), site(1, 5, 1.5),
        site(6, 2, 1.5),
        // light tail
        site(0, 0, 1.0), site(0, 3, 0.9), site(0, 6, 0.9), site(1, 7, 0.8),
        site(2, 6, 0.8), site(3, 7, 0.7), site(4, 0, 0.7), site(5, 1, 0.6),
        site(5, 7, 0.6), site(6, 4, 0.5), site(6, 6, 0.5), site(7, 0, 0.5),
        site(7, 2, 0.4), site(7, 5, 0.4), site(7, 7, 0.4), site(0, 1, 0.3),
        site(1, 0, 0.3), site(2, 0, 0.3), site(4, 4, 0.3), site(5, 3, 0.3),
        site(6, 0, 0.2), site(6, 7, 0.2), site(7, 3, 0.2), site(0, 4, 0.2),
        site(1, 3, 0.2), site(3, 5, 0.2), site(5, 0, 0.2), site(7, 6, 0.2),
        site(4, 7, 0.2), site(6, 5, 0.2),
    };
    return w;
}

SynthResult generate(const WorldConfig& cfg) {
    if (cfg.sites.empty()) throw std::invalid_argument("generate: no sites");
    if (cfg.n_trucks < 1) throw std::invalid_argument("generate: need at least one truck");
    if (cfg.dwell_mean_s < cfg.dwell_min_s)
        throw std::invalid_argument("generate: dwell mean below the dwell floor");
    for (const auto& s : cfg.sites)
        if (s.lat < cfg.bbox.lat_min || s.lat > cfg.bbox.lat_max || s.lon < cfg.bbox.lon_min ||
            s.lon > cfg.bbox.lon_max)
            throw std::invalid_argument("generate: site outside bbox");

    LocalFrame frame(cfg.bbox);
    const std::int64_t t_end = cfg.t0 + static_cast<std::int64_t>(cfg.duration_days) * 86400;

    SynthResult out;
    out.truth.slot_len = 1800;
    out.truth.n_slots = static_cast<int>((t_end - cfg.t0) / out.truth.slot_len);
    out.truth.site_slot_counts.assign(cfg.sites.size(),
                                      std::vector<int>(out.truth.n_slots, 0));
    out.truth.slot_intensity.resize(out.truth.n_slots);
    for (int s = 0; s < out.truth.n_slots; ++s) {
        const std::int64_t ts = cfg.t0 + static_cast<std::int64_t>(s) * out.truth.slot_len;
        out.truth.slot_intensity[s] = cfg.daily[hour_of_day(ts)] * cfg.weekly[day_of_week(ts)];
    }

    std::vector<double> cumw(cfg.sites.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < cfg.sites.size(); ++i) {
        if (cfg.sites[i].weight < 0.0) throw std::invalid_argument("generate: negative site weight");
        acc += cfg.sites[i].weight;
        cumw[i] = acc;
    }
    if (acc <= 0.0) throw std::invalid_argument("generate: all site weights zero");

    out.trajectories.resize(cfg.n_trucks);
    for (int truck = 0; truck < cfg.n_trucks; ++truck) {
        std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed),
                          static_cast<std::uint64_t>(truck) + 1};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> uni(0.0, 1.0);

        auto& traj = out.trajectories[truck];
        char name[16];
        std::snprintf(name, sizeof(name), "truck%04d", truck);
        traj.truck_id = name;

        double lat = cfg.sites[truck % cfg.sites.size()].lat;
        double lon = cfg.sites[truck % cfg.sites.size()].lon;
        std::int64_t t = cfg.t0;

        auto emit = [&](std::int64_t when, double plat, double plon) {
            // jitter <= jitter_m, uniform in the disc
            const double r = cfg.jitter_m * std::sqrt(uni(rng));
            const double a = 2.0 * kPi * uni(rng);
            plat += r * std::sin(a) / frame.m_lat;
            plon += r * std::cos(a) / frame.m_lon;
            traj.points.push_back({when, clampd(plat, cfg.bbox.lat_min, cfg.bbox.lat_max),
                                   clampd(plon, cfg.bbox.lon_min, cfg.bbox.lon_max)});
        };

        // Site approaches stop emitting short of the destination so approach
        // points never sit inside the stay-point radius of the dwell that
        // follows; staging legs emit to the end to keep dwells separated.
        auto travel_to = [&](double dlat, double dlon, double cutoff_m) {
            const double dist = frame.dist_m(lat, lon, dlat, dlon);
            const double dur = dist / cfg.trip_speed_mps;
            const std::int64_t steps = static_cast<std::int64_t>(dur / cfg.point_interval_s);
            for (std::int64_t i = 1; i <= steps; ++i) {
                const double gone = static_cast<double>(i) * cfg.point_interval_s *
                                    cfg.trip_speed_mps;
                if (dist - gone <= cutoff_m) break;
                const double frac = gone / dist;
                emit(t + i * cfg.point_interval_s, lat + frac * (dlat - lat),
                     lon + frac * (dlon - lon));
            }
            t += static_cast<std::int64_t>(std::ceil(dur));
            lat = dlat;
            lon = dlon;
        };

        while (t < t_end) {
            const double duty = cfg.daily[hour_of_day(t)] * cfg.weekly[day_of_week(t)];
            if (uni(rng) >= duty) {
                t += cfg.idle_step_s;  // silent: parked trucks report nothing
                continue;
            }
            // choose a site by attraction
            const double pick = uni(rng) * acc;
            int site = static_cast<int>(std::lower_bound(cumw.begin(), cumw.end(), pick) -
                                        cumw.begin());
            site = std::min<int>(site, static_cast<int>(cfg.sites.size()) - 1);

            travel_to(cfg.sites[site].lat, cfg.sites[site].lon, 320.0);
            if (t >= t_end) break;

            // planted dwell: points stay within ~45 m of the site center
            double span = cfg.dwell_mean_s * (0.75 + 0.5 * uni(rng));
            const std::int64_t dwell_len =
                static_cast<std::int64_t>(std::max(cfg.dwell_min_s, span));
            if (t + dwell_len >= t_end) break;  // no partial dwells at the window end
            const double or_ = 25.0 * std::sqrt(uni(rng));
            const double oa = 2.0 * kPi * uni(rng);
            const double dlat = cfg.sites[site].lat + or_ * std::sin(oa) / frame.m_lat;
            const double dlon = cfg.sites[site].lon + or_ * std::cos(oa) / frame.m_lon;
            const std::int64_t dwell_end = t + dwell_len;
            const std::int64_t arrive = t;
            for (std::int64_t tt = t; tt <= dwell_end; tt += cfg.point_interval_s)
                emit(tt, dlat, dlon);
            out.truth.dwells.push_back({truck, site, arrive, dwell_end});
            const int s0 = static_cast<int>((arrive - cfg.t0) / out.truth.slot_len);
            const int s1 = std::min<int>(out.truth.n_slots - 1,
                                         static_cast<int>((dwell_end - cfg.t0) / out.truth.slot_len));
            for (int s = s0; s <= s1 && s >= 0; ++s) ++out.truth.site_slot_counts[site][s];
            t = dwell_end;
            lat = dlat;
            lon = dlon;

            // staging departure keeps consecutive dwells spatially separated
            const double da = 2.0 * kPi * uni(rng);
            const double slat =
                clampd(lat + cfg.depart_m * std::sin(da) / frame.m_lat, cfg.bbox.lat_min,
                       cfg.bbox.lat_max);
            const double slon =
                clampd(lon + cfg.depart_m * std::cos(da) / frame.m_lon, cfg.bbox.lon_min,
                       cfg.bbox.lon_max);
            travel_to(slat, slon, 0.0);
        }
        // points are time-ordered by construction; drop any point past t_end
        while (!traj.points.empty() && traj.points.back().t >= t_end) traj.points.pop_back();
    }
    return out;
}

ImbalanceProfile imbalance_profile(const WorldConfig& cfg, int medium_bound) {
    if (cfg.sites.empty()) throw std::invalid_argument("imbalance_profile: no sites");
    // Expected dwells overlapping a slot at a site, Poisson-approximated.
    // Working trucks split across sites by attraction; a dwell of mean length
    // L overlaps (L + slot) / max(L, slot) ~ dwell turnover per slot.
    double wsum = 0.0;
    for (const auto& s : cfg.sites) wsum += s.weight;
    const double slot = 1800.0;
    const double travel_est = 400.0;  // a few minutes between sites
    const double cycle = cfg.dwell_mean_s + travel_est;
    const double overlap = (cfg.dwell_mean_s + slot) / cycle;

    GridSpec grid = build_grid(cfg.bbox, 1000.0);
    std::vector<double> cell_weight(grid.n_cells(), 0.0);
    for (const auto& s : cfg.sites) {
        auto c = locate(grid, s.lat, s.lon);
        if (c) cell_weight[*c] += s.weight / wsum;
    }

    ImbalanceProfile prof;
    double n = 0.0;
    std::array<double, 3> mix = {0.0, 0.0, 0.0};
    for (int h = 0; h < 24; ++h)
        for (int d = 0; d < 7; ++d) {
            const double duty = cfg.daily[h] * cfg.weekly[d];
            for (int c = 0; c < grid.n_cells(); ++c) {
                if (cell_weight[c] == 0.0) continue;
                const double lambda = cfg.n_trucks * duty * cell_weight[c] * overlap;
                // Poisson class shares at this intensity
                double p = std::exp(-lambda);
                double p0 = p, p1 = 0.0;
                for (int v = 1; v <= medium_bound; ++v) {
                    p *= lambda / v;
                    p1 += p;
                }
                mix[0] += p0;
                mix[1] += p1;
                mix[2] += std::max(0.0, 1.0 - p0 - p1);
                n += 1.0;
            }
        }
    for (int c = 0; c < 3; ++c) prof.class_mix[c] = mix[c] / n;
    prof.zero_fraction = prof.class_mix[0];
    return prof;
}

void write_trajectories_csv(const std::string& path, const std::vector<Trajectory>& trajectories) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "truck_id,timestamp,lat,lon\n";
    out.precision(7);
    out << std::fixed;
    for (const auto& tr : trajectories)
        for (const auto& p : tr.points)
            out << tr.truck_id << ',' << p.t << ',' << p.lat << ',' << p.lon << '\n';
}

void write_groundtruth_json(const std::string& path, const GroundTruth& truth) {
    nlohmann::json j;
    j["slot_len_s"] = truth.slot_len;
    j["n_slots"] = truth.n_slots;
    j["slot_intensity"] = truth.slot_intensity;
    auto& dw = j["dwells"] = nlohmann::json::array();
    for (const auto& d : truth.dwells)
        dw.push_back({{"truck", d.truck}, {"site", d.site}, {"t_arrive", d.t_arrive},
                      {"t_depart", d.t_depart}});
    j["site_slot_counts"] = truth.site_slot_counts;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump() << '\n';
}

}  // namespace truckcast
