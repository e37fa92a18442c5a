#pragma once

#include <span>
#include <vector>

namespace truckcast {

/// Full O(nm) dynamic-programming alignment cost with Dist = |x_i - y_j|.
/// Oracle for fast_dtw.
double exact_dtw(std::span<const double> x, std::span<const double> y);

/// The full DP table (n x m, row-major); table.back() is the cost.
std::vector<double> exact_dtw_table(std::span<const double> x, std::span<const double> y);

/// Multiresolution approximation: coarsen by two, align, then refine the
/// alignment within `radius` cells of the projected path. Sequences shorter
/// than radius + 2 fall back to exact_dtw, so a radius covering the longer
/// sequence reproduces the exact cost.
double fast_dtw(std::span<const double> x, std::span<const double> y, int radius);

}  // namespace truckcast
