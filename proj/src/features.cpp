#include "truckcast/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "truckcast/dtw.hpp"
#include "truckcast/timeutil.hpp"

namespace truckcast {

AdjacencyMatrix build_adjacency(const std::vector<Trajectory>& trajectories, const GridSpec& grid,
                                const std::vector<int>& retained_cell_ids, bool* any_edge) {
    if (retained_cell_ids.empty()) throw std::invalid_argument("build_adjacency: no retained cells");
    AdjacencyMatrix adj;
    adj.n = static_cast<int>(retained_cell_ids.size());
    adj.a.assign(static_cast<std::size_t>(adj.n) * adj.n, 0);

    std::unordered_map<int, int> cell_to_row;
    for (int i = 0; i < adj.n; ++i) cell_to_row[retained_cell_ids[i]] = i;

    for (const auto& traj : trajectories) {
        for (std::size_t p = 0; p + 1 < traj.points.size(); ++p) {
            const auto c0 = locate(grid, traj.points[p].lat, traj.points[p].lon);
            const auto c1 = locate(grid, traj.points[p + 1].lat, traj.points[p + 1].lon);
            if (!c0 || !c1 || *c0 == *c1) continue;
            if (!grid.moore_neighbors(*c0, *c1)) continue;  // cell-skipping transitions ignored
            const auto i = cell_to_row.find(*c0);
            const auto j = cell_to_row.find(*c1);
            if (i == cell_to_row.end() || j == cell_to_row.end()) continue;
            adj.set(i->second, j->second);
            adj.set(j->second, i->second);
        }
    }
    if (any_edge) {
        *any_edge = std::any_of(adj.a.begin(), adj.a.end(), [](std::uint8_t b) { return b != 0; });
    }
    return adj;
}

SemanticMatrix build_semantic_matrix(const ActivityTensor& tensor, int radius) {
    const int n = static_cast<int>(tensor.n_cells());
    if (n < 2) throw std::invalid_argument("build_semantic_matrix: need at least 2 cells");
    SemanticMatrix sm;
    sm.n = n;
    sm.radius = radius;
    sm.d.assign(static_cast<std::size_t>(n) * n, 0.0);

    std::vector<std::vector<double>> series(n);
    for (int i = 0; i < n; ++i) {
        series[i].resize(tensor.n_slots);
        for (int s = 0; s < tensor.n_slots; ++s) series[i][s] = tensor.at(i, s);
    }
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double c = fast_dtw(series[i], series[j], radius);
            sm.d[static_cast<std::size_t>(i) * n + j] = c;
            sm.d[static_cast<std::size_t>(j) * n + i] = c;
        }
    return sm;
}

TemporalEncoding temporal_encoding(int slot, std::int64_t t0, std::int64_t slot_len,
                                   std::int64_t utc_offset_s) {
    const std::int64_t t = t0 + static_cast<std::int64_t>(slot) * slot_len + utc_offset_s;
    return {hour_of_day(t), day_of_week(t)};
}

SampleSet make_windows(const ClassTensor& classes, int k, int horizon, std::int64_t utc_offset_s,
                       const ActivityTensor* raw) {
    if (k < 1) throw std::invalid_argument("make_windows: k must be >= 1");
    if (horizon < 1) throw std::invalid_argument("make_windows: horizon must be >= 1");
    if (classes.n_slots < k + horizon)
        throw std::invalid_argument("make_windows: need at least k + horizon slots, have " +
                                    std::to_string(classes.n_slots));
    SampleSet s;
    s.k = k;
    s.horizon = horizon;
    s.classes = classes;
    if (raw) {
        if (raw->counts.size() != classes.labels.size())
            throw std::invalid_argument("make_windows: raw counts do not match the class tensor");
        s.counts = raw->counts;
        s.has_counts = true;
    }
    s.enc.reserve(classes.n_slots);
    for (int slot = 0; slot < classes.n_slots; ++slot)
        s.enc.push_back(temporal_encoding(slot, classes.t0, classes.slot_len, utc_offset_s));
    for (int tau = k + horizon - 1; tau < classes.n_slots; ++tau) s.target_slots.push_back(tau);
    return s;
}

std::pair<SampleSet, SampleSet> split_dataset(const SampleSet& samples, const SplitConfig& cfg) {
    if (!(cfg.train_ratio > 0.0) || !(cfg.train_ratio < 1.0))
        throw std::invalid_argument("split_dataset: train_ratio must be in (0, 1)");
    const std::size_t n = samples.target_slots.size();
    if (n < 2) throw std::runtime_error("split_dataset: need at least 2 target slots");

    std::vector<int> order = samples.target_slots;
    if (!cfg.chronological) {
        std::mt19937_64 rng(cfg.seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::size_t n_train = static_cast<std::size_t>(cfg.train_ratio * static_cast<double>(n));
    n_train = std::max<std::size_t>(1, std::min(n_train, n - 1));

    SampleSet train = samples;
    SampleSet test = samples;
    train.target_slots.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.target_slots.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train.target_slots.begin(), train.target_slots.end());
    std::sort(test.target_slots.begin(), test.target_slots.end());
    return {std::move(train), std::move(test)};
}

void write_adjacency_csv(const std::string& path, const AdjacencyMatrix& a) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "i,j,value\n";
    for (int i = 0; i < a.n; ++i)
        for (int j = 0; j < a.n; ++j)
            if (a.at(i, j)) out << i << ',' << j << ',' << 1 << '\n';
}

void write_semantic_csv(const std::string& path, const SemanticMatrix& d) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "i,j,value\n";
    out.precision(12);
    for (int i = 0; i < d.n; ++i)
        for (int j = 0; j < d.n; ++j) out << i << ',' << j << ',' << d.at(i, j) << '\n';
}

namespace {
constexpr char kSampleMagic[4] = {'T', 'C', 'S', '1'};
}

void write_sampleset(const std::string& path, const SampleSet& s) {
    nlohmann::json header;
    header["k"] = s.k;
    header["horizon"] = s.horizon;
    header["cell_ids"] = s.classes.cell_ids;
    header["t0"] = s.classes.t0;
    header["slot_len_s"] = s.classes.slot_len;
    header["n_slots"] = s.classes.n_slots;
    header["medium_bound"] = s.classes.medium_bound;
    header["target_slots"] = s.target_slots;
    header["has_counts"] = s.has_counts;
    const std::string hjson = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kSampleMagic, 4);
    const std::uint32_t hlen = static_cast<std::uint32_t>(hjson.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
    out.write(reinterpret_cast<const char*>(s.classes.labels.data()),
              static_cast<std::streamsize>(s.classes.labels.size()));
    for (const auto& e : s.enc) {
        const std::uint8_t h = static_cast<std::uint8_t>(e.hour);
        const std::uint8_t w = static_cast<std::uint8_t>(e.dow);
        out.write(reinterpret_cast<const char*>(&h), 1);
        out.write(reinterpret_cast<const char*>(&w), 1);
    }
    if (s.has_counts) {
        for (int c : s.counts) {
            const std::int32_t v = c;
            out.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
}

SampleSet read_sampleset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kSampleMagic, 4))
        throw std::runtime_error("not a sample file: " + path);
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hjson(hlen, '\0');
    in.read(hjson.data(), hlen);
    if (!in) throw std::runtime_error("truncated sample file: " + path);
    nlohmann::json header = nlohmann::json::parse(hjson);

    SampleSet s;
    s.k = header.at("k").get<int>();
    s.horizon = header.at("horizon").get<int>();
    s.classes.cell_ids = header.at("cell_ids").get<std::vector<int>>();
    s.classes.t0 = header.at("t0").get<std::int64_t>();
    s.classes.slot_len = header.at("slot_len_s").get<std::int64_t>();
    s.classes.n_slots = header.at("n_slots").get<int>();
    s.classes.medium_bound = header.at("medium_bound").get<int>();
    s.target_slots = header.at("target_slots").get<std::vector<int>>();

    const std::size_t n_labels = s.classes.cell_ids.size() * static_cast<std::size_t>(s.classes.n_slots);
    s.classes.labels.resize(n_labels);
    in.read(reinterpret_cast<char*>(s.classes.labels.data()), static_cast<std::streamsize>(n_labels));
    s.enc.resize(s.classes.n_slots);
    for (auto& e : s.enc) {
        std::uint8_t h = 0, w = 0;
        in.read(reinterpret_cast<char*>(&h), 1);
        in.read(reinterpret_cast<char*>(&w), 1);
        e.hour = h;
        e.dow = w;
    }
    s.has_counts = header.value("has_counts", false);
    if (s.has_counts) {
        s.counts.resize(n_labels);
        for (auto& c : s.counts) {
            std::int32_t v = 0;
            in.read(reinterpret_cast<char*>(&v), 4);
            c = v;
        }
    }
    if (!in) throw std::runtime_error("truncated sample file: " + path);
    return s;
}

}  // namespace truckcast
