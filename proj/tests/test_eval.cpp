#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "truckcast/eval.hpp"
#include "truckcast/geo.hpp"

using namespace truckcast;

namespace {

GridSpec grid5() {
    BBox b;
    b.lat_min = 30.0;
    b.lon_min = 104.0;
    b.lat_max = 30.0 + 5000.0 / kMetersPerDegLat;
    b.lon_max = 104.0 + 5000.0 / meters_per_deg_lon(30.02);
    return build_grid(b, 1000.0);
}

}  // namespace

TEST_CASE("confusion matrix tallies") {
    std::vector<int> perfect = {0, 1, 2, 1};
    auto cm = confusion_matrix(perfect, perfect);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(1, 1) == 2);
    CHECK(cm.at(2, 2) == 1);
    CHECK(cm.total() == 4);

    std::vector<int> pred = {0, 1, 2, 2};
    std::vector<int> truth = {0, 1, 1, 2};
    auto cm2 = confusion_matrix(pred, truth);
    CHECK(cm2.at(1, 2) == 1);
    CHECK(cm2.at(0, 0) == 1);
    CHECK(cm2.at(1, 1) == 1);
    CHECK(cm2.at(2, 2) == 1);

    auto empty = confusion_matrix({}, {});
    CHECK(empty.total() == 0);
    CHECK_THROWS(confusion_matrix(pred, perfect.size() == 4 ? std::vector<int>{0} : truth));
}

TEST_CASE("prf on the identity is perfect") {
    std::vector<int> v = {0, 0, 1, 1, 2, 2};
    auto rep = prf(confusion_matrix(v, v));
    for (int c = 0; c < 3; ++c) {
        CHECK(rep.per_class[c].precision == 1.0);
        CHECK(rep.per_class[c].recall == 1.0);
        CHECK(rep.per_class[c].f1 == 1.0);
    }
    CHECK(rep.macro_f1 == 1.0);
}

TEST_CASE("prf matches a hand-computed fixture") {
    // row sums (10,10,10), diagonal (9,7,8)
    ConfusionMatrix cm;
    cm.counts = {{{9, 1, 0}, {2, 7, 1}, {0, 2, 8}}};
    auto rep = prf(cm);
    CHECK(rep.per_class[0].precision == doctest::Approx(9.0 / 11.0));
    CHECK(rep.per_class[0].recall == doctest::Approx(0.9));
    CHECK(rep.per_class[1].precision == doctest::Approx(0.7));
    CHECK(rep.per_class[1].recall == doctest::Approx(0.7));
    CHECK(rep.per_class[2].precision == doctest::Approx(8.0 / 9.0));
    CHECK(rep.per_class[2].recall == doctest::Approx(0.8));
    const double f0 = 2.0 * (9.0 / 11.0) * 0.9 / (9.0 / 11.0 + 0.9);
    const double f2 = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
    CHECK(rep.per_class[0].f1 == doctest::Approx(f0));
    CHECK(rep.per_class[1].f1 == doctest::Approx(0.7));
    CHECK(rep.macro_f1 == doctest::Approx((f0 + 0.7 + f2) / 3.0).epsilon(1e-12));
}

TEST_CASE("absent class scores zero by the 0/0 rule") {
    std::vector<int> pred = {0, 0, 1};
    std::vector<int> truth = {0, 0, 1};
    auto rep = prf(confusion_matrix(pred, truth));
    CHECK(rep.per_class[2].precision == 0.0);
    CHECK(rep.per_class[2].recall == 0.0);
    CHECK(rep.per_class[2].f1 == 0.0);
    CHECK(rep.macro_f1 == doctest::Approx((1.0 + 1.0 + 0.0) / 3.0));
}

TEST_CASE("macro f1 equals the mean of per-class f1") {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> cls(0, 2);
    std::vector<int> pred, truth;
    for (int i = 0; i < 500; ++i) {
        pred.push_back(cls(rng));
        truth.push_back(cls(rng));
    }
    auto rep = prf(confusion_matrix(pred, truth));
    const double mean =
        (rep.per_class[0].f1 + rep.per_class[1].f1 + rep.per_class[2].f1) / 3.0;
    CHECK(std::abs(rep.macro_f1 - mean) < 1e-12);
    // permutation invariance
    std::vector<std::size_t> idx(pred.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<int> p2, t2;
    for (auto i : idx) {
        p2.push_back(pred[i]);
        t2.push_back(truth[i]);
    }
    auto rep2 = prf(confusion_matrix(p2, t2));
    CHECK(rep2.macro_f1 == rep.macro_f1);
}

TEST_CASE("aggregate_seeds mean and sample std") {
    MetricsReport a;
    a.macro_f1 = 0.7;
    MetricsReport b;
    b.macro_f1 = 0.8;
    auto agg = aggregate_seeds({a, b});
    CHECK(agg.macro_f1 == doctest::Approx(0.75));
    CHECK(agg.macro_f1_std == doctest::Approx(0.0707106781).epsilon(1e-6));
    CHECK(agg.has_spread);

    auto same = aggregate_seeds({a, a, a});
    CHECK(same.macro_f1_std == doctest::Approx(0.0));
    CHECK_THROWS(aggregate_seeds({a}));

    std::vector<MetricsReport> ten(10, a);
    CHECK(aggregate_seeds(ten).macro_f1 == doctest::Approx(0.7));
}

TEST_CASE("relaxed high-activity criterion") {
    auto g = grid5();
    // retained cells: a 3x3 block, row-major ids
    std::vector<int> cells;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cells.push_back(g.cell_at(r, c));

    auto eval_one = [&](std::vector<int> pred, std::vector<int> truth) {
        std::vector<std::pair<int, int>> keys;
        for (int i = 0; i < 9; ++i) keys.emplace_back(i, 0);
        return relaxed_high_activity(pred, truth, keys, g, cells);
    };

    SUBCASE("neighbor truth rescues a prediction") {
        // predicted high at center (row 1), true high only at its neighbor
        std::vector<int> pred = {0, 0, 0, 0, 2, 0, 0, 0, 0};
        std::vector<int> truth = {0, 2, 0, 0, 1, 0, 0, 0, 0};
        auto m = eval_one(pred, truth);
        CHECK(m.precision == doctest::Approx(1.0));
        CHECK(m.recall == doctest::Approx(1.0));  // the true high sees a predicted high one hop away
    }
    SUBCASE("isolated prediction is a false positive") {
        std::vector<int> pred = {2, 0, 0, 0, 0, 0, 0, 0, 0};
        std::vector<int> truth = {0, 0, 0, 0, 0, 0, 0, 0, 2};  // two hops away
        auto m = eval_one(pred, truth);
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
        CHECK(m.f1 == 0.0);
    }
    SUBCASE("identical pred and truth dominate strict metrics") {
        std::vector<int> v = {0, 2, 1, 0, 2, 0, 1, 0, 2};
        auto m = eval_one(v, v);
        auto strict = prf(confusion_matrix(v, v));
        CHECK(m.precision >= strict.per_class[2].precision);
        CHECK(m.recall >= strict.per_class[2].recall);
        CHECK(m.f1 >= strict.per_class[2].f1);
    }
}

TEST_CASE("relaxed metrics dominate strict metrics on random data") {
    auto g = grid5();
    std::vector<int> cells;
    for (int c = 0; c < g.n_cells(); ++c) cells.push_back(c);
    std::mt19937_64 rng(77);
    std::discrete_distribution<int> cls({0.7, 0.2, 0.1});
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<int> pred, truth;
        std::vector<std::pair<int, int>> keys;
        for (int slot = 0; slot < 6; ++slot)
            for (int c = 0; c < g.n_cells(); ++c) {
                keys.emplace_back(c, slot);
                pred.push_back(cls(rng));
                truth.push_back(cls(rng));
            }
        auto relaxed = relaxed_high_activity(pred, truth, keys, g, cells);
        auto strict = prf(confusion_matrix(pred, truth));
        CHECK(relaxed.precision >= strict.per_class[2].precision - 1e-15);
        CHECK(relaxed.recall >= strict.per_class[2].recall - 1e-15);
        CHECK(relaxed.f1 >= strict.per_class[2].f1 - 1e-15);
    }
}

TEST_CASE("horizon_sweep runs one report per horizon") {
    std::vector<int> horizons = {1, 2, 3, 4};
    std::function<int(int)> run = [](int h) { return h * 10; };
    auto reports = horizon_sweep(run, horizons);
    CHECK(reports == std::vector<int>{10, 20, 30, 40});
}
