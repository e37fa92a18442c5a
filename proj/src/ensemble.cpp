#include "truckcast/ensemble.hpp"

#include <stdexcept>

namespace truckcast {

ProbTensor soft_vote(const std::vector<ProbTensor>& per_model, const EnsembleConfig& cfg) {
    if (per_model.empty()) throw std::invalid_argument("soft_vote: no model outputs");
    if (per_model.size() != cfg.weights.size())
        throw std::invalid_argument("soft_vote: weight count does not match model count");
    double wsum = 0.0;
    for (double w : cfg.weights) {
        if (w < 0.0) throw std::invalid_argument("soft_vote: negative model weight");
        wsum += w;
    }
    if (wsum == 0.0) throw std::invalid_argument("soft_vote: all model weights are zero");

    const std::size_t n = per_model[0].rows.size();
    for (const auto& pt : per_model) {
        if (pt.rows.size() != n || pt.keys != per_model[0].keys)
            throw std::invalid_argument("soft_vote: misaligned model outputs");
    }

    ProbTensor fused;
    fused.keys = per_model[0].keys;
    fused.rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<double, 3> acc = {0.0, 0.0, 0.0};
        for (std::size_t m = 0; m < per_model.size(); ++m)
            for (int c = 0; c < 3; ++c) acc[c] += cfg.weights[m] * per_model[m].rows[i][c];
        const double s = acc[0] + acc[1] + acc[2];
        for (int c = 0; c < 3; ++c) fused.rows[i][c] = s > 0.0 ? acc[c] / s : 1.0 / 3.0;
    }
    return fused;
}

int argmax_class(const std::array<double, 3>& row) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
        if (row[c] >= row[best]) best = c;  // ties toward the higher class
    return best;
}

std::vector<int> predict_classes(const ProbTensor& fused) {
    std::vector<int> out;
    out.reserve(fused.rows.size());
    for (const auto& row : fused.rows) out.push_back(argmax_class(row));
    return out;
}

}  // namespace truckcast
