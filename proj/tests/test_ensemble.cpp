#include <doctest.h>

#include <algorithm>
#include <random>

#include "truckcast/ensemble.hpp"

using namespace truckcast;

namespace {

ProbTensor make_pt(std::vector<std::array<double, 3>> rows) {
    ProbTensor pt;
    pt.rows = std::move(rows);
    for (std::size_t i = 0; i < pt.rows.size(); ++i)
        pt.keys.emplace_back(static_cast<int>(i), 0);
    return pt;
}

}  // namespace

TEST_CASE("consensus and degenerate votes") {
    EnsembleConfig cfg;  // default paper weights
    CHECK(cfg.weights == std::array<double, 4>{1.1, 1.1, 0.5, 1.3});
    std::array<double, 3> p = {0.2, 0.5, 0.3};
    std::vector<ProbTensor> models(4, make_pt({p}));
    auto fused = soft_vote(models, cfg);
    for (int c = 0; c < 3; ++c) CHECK(fused.rows[0][c] == doctest::Approx(p[c]));

    EnsembleConfig first_only;
    first_only.weights = {1.0, 0.0, 0.0, 0.0};
    std::vector<ProbTensor> mixed = {make_pt({{0.7, 0.2, 0.1}}), make_pt({{0.1, 0.8, 0.1}}),
                                     make_pt({{0.1, 0.1, 0.8}}), make_pt({{0.3, 0.3, 0.4}})};
    auto first = soft_vote(mixed, first_only);
    CHECK(first.rows[0][0] == doctest::Approx(0.7));
    CHECK(first.rows[0][1] == doctest::Approx(0.2));
}

TEST_CASE("worked weighted vote") {
    EnsembleConfig cfg;  // (1.1, 1.1, 0.5, 1.3)
    std::vector<ProbTensor> models = {make_pt({{0.6, 0.3, 0.1}}), make_pt({{0.2, 0.5, 0.3}}),
                                      make_pt({{0.1, 0.1, 0.8}}), make_pt({{0.3, 0.4, 0.3}})};
    auto fused = soft_vote(models, cfg);
    // unnormalized = (1.32, 1.45, 1.23)
    const double total = 1.32 + 1.45 + 1.23;
    CHECK(fused.rows[0][0] == doctest::Approx(1.32 / total));
    CHECK(fused.rows[0][1] == doctest::Approx(1.45 / total));
    CHECK(fused.rows[0][2] == doctest::Approx(1.23 / total));
    CHECK(predict_classes(fused)[0] == 1);
}

TEST_CASE("argmax ties break toward the higher class") {
    CHECK(argmax_class({0.1, 0.2, 0.7}) == 2);
    CHECK(argmax_class({0.5, 0.5, 0.0}) == 1);
    CHECK(argmax_class({0.4, 0.3, 0.4}) == 2);
    CHECK(argmax_class({1.0 / 3, 1.0 / 3, 1.0 / 3}) == 2);
}

TEST_CASE("positive weight rescaling changes no prediction") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ProbTensor> models(4);
    for (auto& m : models) {
        std::vector<std::array<double, 3>> rows;
        for (int i = 0; i < 50; ++i) {
            std::array<double, 3> r = {u(rng), u(rng), u(rng)};
            const double s = r[0] + r[1] + r[2];
            for (auto& x : r) x /= s;
            rows.push_back(r);
        }
        m = make_pt(std::move(rows));
    }
    EnsembleConfig cfg;
    auto base = predict_classes(soft_vote(models, cfg));
    EnsembleConfig scaled;
    for (int i = 0; i < 4; ++i) scaled.weights[i] = cfg.weights[i] * 17.5;
    CHECK(predict_classes(soft_vote(models, scaled)) == base);
}

TEST_CASE("soft vote is permutation-equivariant over samples") {
    std::vector<ProbTensor> models = {
        make_pt({{0.6, 0.3, 0.1}, {0.1, 0.8, 0.1}}), make_pt({{0.2, 0.5, 0.3}, {0.2, 0.2, 0.6}}),
        make_pt({{0.1, 0.1, 0.8}, {0.4, 0.4, 0.2}}), make_pt({{0.3, 0.4, 0.3}, {0.5, 0.2, 0.3}})};
    EnsembleConfig cfg;
    auto fused = soft_vote(models, cfg);
    // swap the two samples everywhere
    for (auto& m : models) {
        std::swap(m.rows[0], m.rows[1]);
        std::swap(m.keys[0], m.keys[1]);
    }
    auto swapped = soft_vote(models, cfg);
    CHECK(swapped.rows[0] == fused.rows[1]);
    CHECK(swapped.rows[1] == fused.rows[0]);
}

TEST_CASE("one-hot outputs with equal weights reduce to majority voting") {
    auto onehot = [](int c) {
        std::array<double, 3> r = {0.0, 0.0, 0.0};
        r[c] = 1.0;
        return r;
    };
    std::vector<ProbTensor> models = {make_pt({onehot(1)}), make_pt({onehot(1)}),
                                      make_pt({onehot(2)}), make_pt({onehot(0)})};
    EnsembleConfig eq;
    eq.weights = {1.0, 1.0, 1.0, 1.0};
    CHECK(predict_classes(soft_vote(models, eq))[0] == 1);
    // two-two tie resolves toward the higher class
    std::vector<ProbTensor> tied = {make_pt({onehot(0)}), make_pt({onehot(0)}),
                                    make_pt({onehot(2)}), make_pt({onehot(2)})};
    CHECK(predict_classes(soft_vote(tied, eq))[0] == 2);
}

TEST_CASE("misaligned inputs are rejected") {
    std::vector<ProbTensor> models = {make_pt({{1, 0, 0}}), make_pt({{1, 0, 0}, {0, 1, 0}}),
                                      make_pt({{1, 0, 0}}), make_pt({{1, 0, 0}})};
    EnsembleConfig cfg;
    CHECK_THROWS(soft_vote(models, cfg));
    EnsembleConfig zeros;
    zeros.weights = {0, 0, 0, 0};
    std::vector<ProbTensor> ok(4, make_pt({{1, 0, 0}}));
    CHECK_THROWS(soft_vote(ok, zeros));
}
