#include <doctest.h>

#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "truckcast/geo.hpp"
#include "truckcast/gridding.hpp"

using namespace truckcast;

namespace {

BBox box_of_meters(double lat0, double lon0, double height_m, double width_m) {
    BBox b;
    b.lat_min = lat0;
    b.lon_min = lon0;
    b.lat_max = lat0 + height_m / kMetersPerDegLat;
    const double ref = 0.5 * (b.lat_min + b.lat_max);
    b.lon_max = lon0 + width_m / meters_per_deg_lon(ref);
    return b;
}

StayPoint sp_at(const std::string& truck, double lat, double lon, std::int64_t a,
                std::int64_t b) {
    StayPoint s;
    s.truck_id = truck;
    s.anchor_lat = lat;
    s.anchor_lon = lon;
    s.centroid_lat = lat;
    s.centroid_lon = lon;
    s.t_start = a;
    s.t_end = b;
    s.n_points = 2;
    return s;
}

}  // namespace

TEST_CASE("build_grid covers a 10km box with 100 cells") {
    auto g = build_grid(box_of_meters(0.0, 0.0, 10000.0, 10000.0), 1000.0);
    CHECK(g.n_rows == 10);
    CHECK(g.n_cols == 10);
    CHECK(g.n_cells() == 100);
}

TEST_CASE("build_grid rejects bad boxes") {
    CHECK_THROWS(build_grid({30.0, 104.0, 30.0, 105.0}, 1000.0));  // degenerate lat
    CHECK_THROWS(build_grid({30.0, 179.5, 31.0, -179.5}, 1000.0));  // antimeridian
    CHECK_THROWS(build_grid(box_of_meters(0, 0, 1000, 1000), -5.0));
}

TEST_CASE("locate maps offsets and boundaries") {
    auto g = build_grid(box_of_meters(30.0, 104.0, 8000.0, 8000.0), 1000.0);
    CHECK(locate(g, 30.0, 104.0) == 0);  // origin corner
    double lat = 30.0 + 500.0 / kMetersPerDegLat;
    double lon = 104.0 + 1500.0 / meters_per_deg_lon(g.ref_lat);
    CHECK(locate(g, lat, lon) == g.cell_at(0, 1));
    CHECK(!locate(g, 29.0, 104.0));
    CHECK(!locate(g, 30.0, 120.0));
}

TEST_CASE("cell centers locate back to their cells") {
    auto g = build_grid(box_of_meters(30.0, 104.0, 7000.0, 5000.0), 1000.0);
    for (int c = 0; c < g.n_cells(); ++c) {
        double lat, lon;
        g.cell_center(c, lat, lon);
        REQUIRE(locate(g, lat, lon) == c);
    }
}

TEST_CASE("count_activity places unit mass") {
    auto g = build_grid(box_of_meters(30.0, 104.0, 4000.0, 4000.0), 1000.0);
    double lat, lon;
    g.cell_center(5, lat, lon);
    std::vector<StayPoint> sps = {sp_at("a", lat, lon, 100, 1700)};
    auto t = count_activity(sps, g, 1800, 0, 4);
    CHECK(t.at(5, 0) == 1);
    long long total = std::accumulate(t.counts.begin(), t.counts.end(), 0LL);
    CHECK(total == 1);
}

TEST_CASE("count_activity spans slots and caps per truck") {
    auto g = build_grid(box_of_meters(30.0, 104.0, 4000.0, 4000.0), 1000.0);
    double lat, lon;
    g.cell_center(2, lat, lon);
    std::vector<StayPoint> sps = {sp_at("a", lat, lon, 1900, 5300)};  // slots 1..2
    auto t = count_activity(sps, g, 1800, 0, 6);
    CHECK(t.at(2, 1) == 1);
    CHECK(t.at(2, 2) == 1);
    CHECK(t.at(2, 0) == 0);
    CHECK(t.at(2, 3) == 0);

    // same truck twice in a slot counts once; a second truck counts again
    sps.push_back(sp_at("a", lat, lon, 2000, 2600));
    sps.push_back(sp_at("b", lat, lon, 2000, 2600));
    auto t2 = count_activity(sps, g, 1800, 0, 6);
    CHECK(t2.at(2, 1) == 2);

    CountStats stats;
    sps.push_back(sp_at("c", lat, lon, 99000, 99900));  // outside the window
    count_activity(sps, g, 1800, 0, 6, &stats);
    CHECK(stats.dropped_outside_time == 1);
}

TEST_CASE("count equals a naive recount after the cap") {
    auto g = build_grid(box_of_meters(30.0, 104.0, 6000.0, 6000.0), 1000.0);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<StayPoint> sps;
    for (int i = 0; i < 300; ++i) {
        double lat = 30.0 + u(rng) * 5900.0 / kMetersPerDegLat;
        double lon = 104.0 + u(rng) * 5900.0 / meters_per_deg_lon(g.ref_lat);
        std::int64_t a = static_cast<std::int64_t>(u(rng) * 40000.0);
        sps.push_back(sp_at("t" + std::to_string(i % 7), lat, lon, a,
                            a + 600 + static_cast<std::int64_t>(u(rng) * 5000.0)));
    }
    auto t = count_activity(sps, g, 1800, 0, 24);
    // naive recount over (truck, cell, slot) triples
    std::set<std::tuple<std::string, int, int>> triples;
    for (const auto& sp : sps) {
        auto cell = locate(g, sp.anchor_lat, sp.anchor_lon);
        if (!cell) continue;
        for (int s = 0; s < 24; ++s) {
            const std::int64_t s0 = static_cast<std::int64_t>(s) * 1800;
            if (sp.t_start < s0 + 1800 && sp.t_end >= s0)
                triples.insert({sp.truck_id, *cell, s});
        }
    }
    long long total = std::accumulate(t.counts.begin(), t.counts.end(), 0LL);
    CHECK(total == static_cast<long long>(triples.size()));
}

TEST_CASE("downsample keeps the top fraction of nonzero cells") {
    ActivityTensor t;
    t.n_slots = 4;
    t.cell_ids.resize(100);
    std::iota(t.cell_ids.begin(), t.cell_ids.end(), 0);
    t.counts.assign(400, 0);
    for (int c = 20; c < 100; ++c) t.at(c, 0) = c;  // distinct means, 20 all-zero cells
    auto ds = downsample_grids(t, 0.25);
    REQUIRE(ds.retained_rows.size() == 20);
    CHECK(ds.retained_rows.front() == 80);  // top-20 means are cells 80..99
    CHECK(ds.retained_rows.back() == 99);
    CHECK(ds.tau_keep == doctest::Approx(80.0 / 4.0));

    auto all = downsample_grids(t, 1.0);
    CHECK(all.retained_rows.size() == 80);

    ActivityTensor zero;
    zero.n_slots = 2;
    zero.cell_ids = {0, 1};
    zero.counts.assign(4, 0);
    CHECK_THROWS(downsample_grids(zero, 0.5));
}

TEST_CASE("downsample is invariant to slot reordering and keeps ties") {
    ActivityTensor t;
    t.n_slots = 3;
    t.cell_ids = {0, 1, 2, 3};
    t.counts = {3, 0, 0,   // mean 1
                0, 0, 3,   // mean 1 (tie)
                6, 3, 0,   // mean 3
                0, 0, 0};
    auto ds = downsample_grids(t, 0.5);
    // top 50% of 3 nonzero cells = 1 cell, plus... threshold is cell 2 only
    CHECK(ds.retained_rows == std::vector<int>{2});
    auto ds2 = downsample_grids(t, 0.67);
    // 2 kept, threshold mean 1 has a tie -> both tied cells retained
    CHECK(ds2.retained_rows == std::vector<int>{0, 1, 2});

    ActivityTensor shuffled = t;
    shuffled.counts = {0, 0, 3, 3, 0, 0, 0, 6, 3, 0, 0, 0};
    CHECK(downsample_grids(shuffled, 0.5).retained_rows == ds.retained_rows);
}

TEST_CASE("derive_class_thresholds matches enumeration") {
    ActivityTensor t;
    t.n_slots = 10;
    t.cell_ids = {0};
    t.counts = {1, 1, 2, 2, 3, 3, 4, 4, 5, 10};
    CHECK(derive_class_thresholds(t, 0.10) == 5);

    ActivityTensor eq;
    eq.n_slots = 4;
    eq.cell_ids = {0};
    eq.counts = {7, 7, 7, 7};
    CHECK(derive_class_thresholds(eq, 0.10) == 7);

    ActivityTensor zero;
    zero.n_slots = 2;
    zero.cell_ids = {0};
    zero.counts = {0, 0};
    CHECK_THROWS(derive_class_thresholds(zero, 0.10));
    CHECK_THROWS(derive_class_thresholds(t, 0.0));
}

TEST_CASE("label boundaries match the three-case definition") {
    CHECK(label_of(0, 4) == 0);
    CHECK(label_of(1, 4) == 1);
    CHECK(label_of(4, 4) == 1);
    CHECK(label_of(5, 4) == 2);
    // monotone partition of 0..50 into exactly three contiguous ranges
    int prev = 0;
    int switches = 0;
    for (int v = 0; v <= 50; ++v) {
        const int c = label_of(v, 4);
        CHECK(c >= prev);
        if (c != prev) ++switches;
        prev = c;
    }
    CHECK(switches == 2);

    ActivityTensor t;
    t.n_slots = 3;
    t.cell_ids = {0};
    t.counts = {0, 4, 5};
    auto ct = label_classes(t, 4);
    CHECK(ct.at(0, 0) == 0);
    CHECK(ct.at(0, 1) == 1);
    CHECK(ct.at(0, 2) == 2);
    CHECK_THROWS(label_classes(t, 0));
}
