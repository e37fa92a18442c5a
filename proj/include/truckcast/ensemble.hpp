#pragma once

#include <array>
#include <vector>

#include "truckcast/models.hpp"

namespace truckcast {

struct EnsembleConfig {
    // birnn, tcn, stgcn_lite, pdformer_lite
    std::array<double, 4> weights = {1.1, 1.1, 0.5, 1.3};
};

/// Weighted average of aligned per-model probability rows, renormalized to a
/// simplex. The argmax is invariant to the renormalization.
ProbTensor soft_vote(const std::vector<ProbTensor>& per_model, const EnsembleConfig& cfg);

/// Argmax per row; ties break toward the higher class index.
std::vector<int> predict_classes(const ProbTensor& fused);
int argmax_class(const std::array<double, 3>& row);

}  // namespace truckcast
