#include "truckcast/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace truckcast {

long long ConfusionMatrix::total() const {
    long long t = 0;
    for (const auto& row : counts)
        for (long long c : row) t += c;
    return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> pred, std::span<const int> truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("confusion_matrix: length mismatch");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i] < 0 || truth[i] > 2 || pred[i] < 0 || pred[i] > 2)
            throw std::invalid_argument("confusion_matrix: class out of range");
        ++cm.counts[truth[i]][pred[i]];
    }
    return cm;
}

namespace {
double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }
double f1_of(double p, double r) { return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }
}  // namespace

MetricsReport prf(const ConfusionMatrix& cm) {
    MetricsReport rep;
    double macro = 0.0;
    for (int c = 0; c < 3; ++c) {
        long long col = 0, row = 0;
        for (int k = 0; k < 3; ++k) {
            col += cm.counts[k][c];
            row += cm.counts[c][k];
        }
        const double tp = static_cast<double>(cm.counts[c][c]);
        ClassMetrics m;
        m.precision = safe_div(tp, static_cast<double>(col));
        m.recall = safe_div(tp, static_cast<double>(row));
        m.f1 = f1_of(m.precision, m.recall);
        rep.per_class[c] = m;
        macro += m.f1;
    }
    rep.macro_f1 = macro / 3.0;
    return rep;
}

MetricsReport aggregate_seeds(const std::vector<MetricsReport>& reports) {
    if (reports.size() < 2)
        throw std::invalid_argument("aggregate_seeds: need at least 2 reports");
    const double n = static_cast<double>(reports.size());

    auto mean_std = [&](const std::function<double(const MetricsReport&)>& get, double& mean,
                        double& sd) {
        mean = 0.0;
        for (const auto& r : reports) mean += get(r);
        mean /= n;
        double ss = 0.0;
        for (const auto& r : reports) ss += (get(r) - mean) * (get(r) - mean);
        sd = std::sqrt(ss / (n - 1.0));  // sample std, labeled in output
    };

    MetricsReport agg;
    agg.has_spread = true;
    for (int c = 0; c < 3; ++c) {
        mean_std([c](const MetricsReport& r) { return r.per_class[c].precision; },
                 agg.per_class[c].precision, agg.per_class_std[c].precision);
        mean_std([c](const MetricsReport& r) { return r.per_class[c].recall; },
                 agg.per_class[c].recall, agg.per_class_std[c].recall);
        mean_std([c](const MetricsReport& r) { return r.per_class[c].f1; }, agg.per_class[c].f1,
                 agg.per_class_std[c].f1);
    }
    mean_std([](const MetricsReport& r) { return r.macro_f1; }, agg.macro_f1, agg.macro_f1_std);
    return agg;
}

RelaxedMetrics relaxed_high_activity(std::span<const int> pred, std::span<const int> truth,
                                     std::span<const std::pair<int, int>> keys,
                                     const GridSpec& grid, std::span<const int> cell_ids) {
    if (pred.size() != truth.size() || pred.size() != keys.size())
        throw std::invalid_argument("relaxed_high_activity: misaligned inputs");

    // Moore neighborhood over the retained cells (truncated at the boundary
    // and at non-retained cells, which carry no labels).
    const int n_cells = static_cast<int>(cell_ids.size());
    std::unordered_map<int, int> cell_to_row;
    for (int i = 0; i < n_cells; ++i) {
        if (cell_ids[i] < 0 || cell_ids[i] >= grid.n_cells())
            throw std::invalid_argument("relaxed_high_activity: cell id outside grid");
        cell_to_row[cell_ids[i]] = i;
    }
    std::vector<std::vector<int>> nbr(n_cells);
    for (int i = 0; i < n_cells; ++i) {
        const int r = grid.row_of(cell_ids[i]);
        const int c = grid.col_of(cell_ids[i]);
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
                if (dr == 0 && dc == 0) continue;
                const int rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= grid.n_rows || cc < 0 || cc >= grid.n_cols) continue;
                auto it = cell_to_row.find(grid.cell_at(rr, cc));
                if (it != cell_to_row.end()) nbr[i].push_back(it->second);
            }
    }

    // Group sample indices by slot.
    std::map<int, std::vector<std::size_t>> by_slot;
    for (std::size_t i = 0; i < keys.size(); ++i) by_slot[keys[i].second].push_back(i);

    long long pred2 = 0, pred2_ok = 0, true2 = 0, true2_hit = 0;
    std::vector<int> row_pred(n_cells), row_true(n_cells);
    for (auto& [slot, idxs] : by_slot) {
        std::fill(row_pred.begin(), row_pred.end(), -1);
        std::fill(row_true.begin(), row_true.end(), -1);
        for (std::size_t i : idxs) {
            row_pred[keys[i].first] = pred[i];
            row_true[keys[i].first] = truth[i];
        }
        auto any_high = [&](const std::vector<int>& vals, int cell_row) {
            if (vals[cell_row] == 2) return true;
            for (int nb : nbr[cell_row])
                if (vals[nb] == 2) return true;
            return false;
        };
        for (std::size_t i : idxs) {
            const int s = keys[i].first;
            if (pred[i] == 2) {
                ++pred2;
                if (any_high(row_true, s)) ++pred2_ok;
            }
            if (truth[i] == 2) {
                ++true2;
                if (any_high(row_pred, s)) ++true2_hit;
            }
        }
    }
    RelaxedMetrics m;
    m.precision = safe_div(static_cast<double>(pred2_ok), static_cast<double>(pred2));
    m.recall = safe_div(static_cast<double>(true2_hit), static_cast<double>(true2));
    m.f1 = f1_of(m.precision, m.recall);
    return m;
}

void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "true_class,pred_0,pred_1,pred_2\n";
    for (int t = 0; t < 3; ++t)
        out << t << ',' << cm.counts[t][0] << ',' << cm.counts[t][1] << ',' << cm.counts[t][2]
            << '\n';
}

}  // namespace truckcast
