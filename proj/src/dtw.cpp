#include "truckcast/dtw.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <utility>

namespace truckcast {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct PathResult {
    double cost = 0.0;
    std::vector<std::pair<int, int>> path;  // (i, j) from (0,0) to (n-1, m-1)
};

/// DTW restricted to per-row column windows [lo[i], hi[i]] (inclusive).
PathResult dtw_windowed(std::span<const double> x, std::span<const double> y,
                        const std::vector<int>& lo, const std::vector<int>& hi) {
    const int n = static_cast<int>(x.size());
    const int m = static_cast<int>(y.size());
    std::vector<double> cost(static_cast<std::size_t>(n) * m, kInf);
    auto at = [&](int i, int j) -> double& { return cost[static_cast<std::size_t>(i) * m + j]; };

    for (int i = 0; i < n; ++i) {
        for (int j = lo[i]; j <= hi[i]; ++j) {
            const double d = std::abs(x[i] - y[j]);
            if (i == 0 && j == 0) {
                at(i, j) = d;
                continue;
            }
            double best = kInf;
            if (i > 0) best = std::min(best, at(i - 1, j));
            if (j > 0) best = std::min(best, at(i, j - 1));
            if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
            at(i, j) = d + best;
        }
    }
    if (!std::isfinite(at(n - 1, m - 1)))
        throw std::logic_error("dtw window does not connect the corners");

    PathResult res;
    res.cost = at(n - 1, m - 1);
    int i = n - 1, j = m - 1;
    res.path.emplace_back(i, j);
    while (i > 0 || j > 0) {
        double diag = (i > 0 && j > 0) ? at(i - 1, j - 1) : kInf;
        double up = (i > 0) ? at(i - 1, j) : kInf;
        double left = (j > 0) ? at(i, j - 1) : kInf;
        if (diag <= up && diag <= left) {
            --i;
            --j;
        } else if (up <= left) {
            --i;
        } else {
            --j;
        }
        res.path.emplace_back(i, j);
    }
    std::reverse(res.path.begin(), res.path.end());
    return res;
}

PathResult dtw_full(std::span<const double> x, std::span<const double> y) {
    const int n = static_cast<int>(x.size());
    const int m = static_cast<int>(y.size());
    std::vector<int> lo(n, 0), hi(n, m - 1);
    return dtw_windowed(x, y, lo, hi);
}

std::vector<double> reduce_by_half(std::span<const double> x) {
    std::vector<double> out;
    out.reserve(x.size() / 2 + 1);
    std::size_t i = 0;
    for (; i + 1 < x.size(); i += 2) out.push_back(0.5 * (x[i] + x[i + 1]));
    if (i < x.size()) out.push_back(x[i]);  // lone tail kept as its own coarse point
    return out;
}

/// Per-row column windows on the fine grid: each coarse path cell expands to
/// its 2x2 block, dilated by `radius` in both directions.
void expand_window(const std::vector<std::pair<int, int>>& coarse_path, int n, int m, int radius,
                   std::vector<int>& lo, std::vector<int>& hi) {
    lo.assign(n, m);   // empty range marker
    hi.assign(n, -1);
    auto mark = [&](int i, int j0, int j1) {
        if (i < 0 || i >= n) return;
        lo[i] = std::min(lo[i], std::max(0, j0));
        hi[i] = std::max(hi[i], std::min(m - 1, j1));
    };
    for (auto [ci, cj] : coarse_path) {
        const int i0 = 2 * ci - radius, i1 = 2 * ci + 1 + radius;
        const int j0 = 2 * cj - radius, j1 = 2 * cj + 1 + radius;
        for (int i = i0; i <= i1; ++i) mark(i, j0, j1);
    }
    // Rows never touched by the dilated path (possible for odd tails) attach
    // to the nearest marked row's range.
    for (int i = 1; i < n; ++i)
        if (hi[i] < lo[i]) {
            lo[i] = lo[i - 1];
            hi[i] = hi[i - 1];
        }
    for (int i = n - 2; i >= 0; --i)
        if (hi[i] < lo[i]) {
            lo[i] = lo[i + 1];
            hi[i] = hi[i + 1];
        }
    // Monotone envelopes keep the window connected for the DP.
    for (int i = 1; i < n; ++i) hi[i] = std::max(hi[i], hi[i - 1]);
    for (int i = n - 2; i >= 0; --i) lo[i] = std::min(lo[i], lo[i + 1]);
}

PathResult fast_dtw_impl(std::span<const double> x, std::span<const double> y, int radius) {
    const int n = static_cast<int>(x.size());
    const int m = static_cast<int>(y.size());
    const int min_size = radius + 2;
    if (n < min_size || m < min_size) return dtw_full(x, y);

    const auto xs = reduce_by_half(x);
    const auto ys = reduce_by_half(y);
    const PathResult coarse = fast_dtw_impl(xs, ys, radius);

    std::vector<int> lo, hi;
    expand_window(coarse.path, n, m, radius, lo, hi);
    return dtw_windowed(x, y, lo, hi);
}

}  // namespace

double exact_dtw(std::span<const double> x, std::span<const double> y) {
    if (x.empty() || y.empty()) throw std::invalid_argument("exact_dtw: empty sequence");
    return dtw_full(x, y).cost;
}

std::vector<double> exact_dtw_table(std::span<const double> x, std::span<const double> y) {
    if (x.empty() || y.empty()) throw std::invalid_argument("exact_dtw: empty sequence");
    const int n = static_cast<int>(x.size());
    const int m = static_cast<int>(y.size());
    std::vector<double> table(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            const double d = std::abs(x[i] - y[j]);
            double best;
            if (i == 0 && j == 0)
                best = 0.0;
            else {
                best = kInf;
                if (i > 0) best = std::min(best, table[static_cast<std::size_t>(i - 1) * m + j]);
                if (j > 0) best = std::min(best, table[static_cast<std::size_t>(i) * m + j - 1]);
                if (i > 0 && j > 0)
                    best = std::min(best, table[static_cast<std::size_t>(i - 1) * m + j - 1]);
            }
            table[static_cast<std::size_t>(i) * m + j] = d + best;
        }
    return table;
}

double fast_dtw(std::span<const double> x, std::span<const double> y, int radius) {
    if (x.empty() || y.empty()) throw std::invalid_argument("fast_dtw: empty sequence");
    if (radius < 0) throw std::invalid_argument("fast_dtw: radius must be >= 0");
    return fast_dtw_impl(x, y, radius).cost;
}

}  // namespace truckcast
