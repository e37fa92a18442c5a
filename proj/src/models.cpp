#include "truckcast/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "truckcast/eval.hpp"

namespace truckcast {

using ad::Graph;
using ad::Tensor;
using ad::Var;

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::birnn: return "birnn";
        case ModelKind::tcn: return "tcn";
        case ModelKind::stgcn_lite: return "stgcn_lite";
        case ModelKind::pdformer_lite: return "pdformer_lite";
    }
    return "unknown";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "birnn") return ModelKind::birnn;
    if (s == "tcn") return ModelKind::tcn;
    if (s == "stgcn_lite") return ModelKind::stgcn_lite;
    if (s == "pdformer_lite") return ModelKind::pdformer_lite;
    throw std::invalid_argument("unknown model kind: " + s);
}

double weighted_cross_entropy(std::span<const double> prob_row, int target,
                              const std::array<double, 3>& weights, std::size_t* clamp_counter) {
    if (target < 0 || target >= static_cast<int>(prob_row.size()))
        throw std::invalid_argument("weighted_cross_entropy: target out of range");
    double p = prob_row[target];
    if (p < 1e-12) {
        p = 1e-12;
        if (clamp_counter) ++*clamp_counter;
    }
    return -weights[target] * std::log(p);
}

Tensor semantic_topk_mask(const SemanticMatrix& d, int kappa) {
    const int n = d.n;
    if (kappa >= n)
        throw std::invalid_argument("semantic neighbor count must be below the cell count");
    if (kappa < 0) throw std::invalid_argument("semantic neighbor count must be >= 0");
    Tensor mask({n, n});
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (a == i) return false;  // self excluded
            if (b == i) return true;
            if (d.at(i, a) != d.at(i, b)) return d.at(i, a) < d.at(i, b);
            return a < b;
        });
        for (int k = 0; k < kappa; ++k) mask.v[static_cast<std::size_t>(i) * n + order[k]] = 1.0;
    }
    return mask;
}

Tensor normalized_adjacency(const AdjacencyMatrix& a) {
    const int n = a.n;
    Tensor ahat({n, n});
    std::vector<double> deg(n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) deg[i] += a.at(i, j);
        deg[i] += 1.0;  // self loop
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double v = (i == j) ? 1.0 : static_cast<double>(a.at(i, j));
            if (v != 0.0)
                ahat.v[static_cast<std::size_t>(i) * n + j] = v / std::sqrt(deg[i] * deg[j]);
        }
    return ahat;
}

Tensor geo_mask(const AdjacencyMatrix& a) {
    Tensor mask({a.n, a.n});
    for (int i = 0; i < a.n; ++i)
        for (int j = 0; j < a.n; ++j)
            mask.v[static_cast<std::size_t>(i) * a.n + j] = a.at(i, j) ? 1.0 : 0.0;
    return mask;
}

namespace {

/// Builds the per-timestep input leaves for a batch of rows. Row r reads the
/// window of (cells[r], taus[r]); leaves are [R, in] with one-hot labels (or
/// scaled raw counts) plus learned hour and day-of-week embeddings.
std::vector<Var> make_input_steps(Graph& g, const SampleSet& data, std::span<const int> cells,
                                  std::span<const int> taus, Var emb_hour, Var emb_dow,
                                  bool use_counts) {
    const int R = static_cast<int>(cells.size());
    const int k = data.k;
    if (use_counts && !data.has_counts)
        throw std::invalid_argument("model configured for raw counts but the sample set has none");
    const double count_scale = 1.0 / (data.classes.medium_bound + 1.0);

    std::vector<Var> steps;
    steps.reserve(k);
    std::vector<int> hour_ids(R), dow_ids(R);
    for (int t = 0; t < k; ++t) {
        Tensor base(use_counts ? std::vector<int>{R, 1} : std::vector<int>{R, 3});
        for (int r = 0; r < R; ++r) {
            const int slot = data.window_start(taus[r]) + t;
            if (use_counts) {
                base.v[r] = data.count_at(cells[r], slot) * count_scale;
            } else {
                base.v[static_cast<std::size_t>(r) * 3 + data.classes.at(cells[r], slot)] = 1.0;
            }
            hour_ids[r] = data.enc[slot].hour;
            dow_ids[r] = data.enc[slot].dow;
        }
        Var x = g.constant(std::move(base));
        x = g.concat_last(x, g.embed(emb_hour, hour_ids));
        x = g.concat_last(x, g.embed(emb_dow, dow_ids));
        steps.push_back(x);
    }
    return steps;
}

/// Pushes every parameter as a graph leaf, in store order.
std::vector<Var> bind_params(Graph& g, ad::ParamStore& store, bool with_grad) {
    std::vector<Var> vars;
    vars.reserve(store.size());
    for (auto& p : store.all()) vars.push_back(g.leaf(p.value, with_grad));
    return vars;
}

/// Per-cell samples: index = cell * n_target_slots + slot_index.
void temporal_batch_rows(const SampleSet& data, std::span<const std::size_t> batch,
                         std::vector<int>& cells, std::vector<int>& taus) {
    const std::size_t n_t = data.target_slots.size();
    cells.resize(batch.size());
    taus.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        cells[i] = static_cast<int>(batch[i] / n_t);
        taus[i] = data.target_slots[batch[i] % n_t];
    }
}

/// All-cells samples: index selects a target slot; rows are slot-major.
void spatial_batch_rows(const SampleSet& data, std::span<const std::size_t> batch,
                        std::vector<int>& cells, std::vector<int>& taus) {
    const int S = static_cast<int>(data.n_cells());
    cells.resize(batch.size() * S);
    taus.resize(batch.size() * S);
    for (std::size_t b = 0; b < batch.size(); ++b)
        for (int s = 0; s < S; ++s) {
            cells[b * S + s] = s;
            taus[b * S + s] = data.target_slots[batch[b]];
        }
}

void fill_targets_keys(const SampleSet& data, std::span<const int> cells, std::span<const int> taus,
                       std::vector<int>& targets, std::vector<std::pair<int, int>>* keys) {
    targets.resize(cells.size());
    if (keys) keys->resize(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        targets[i] = data.classes.at(cells[i], taus[i]);
        if (keys) (*keys)[i] = {cells[i], taus[i]};
    }
}

Tensor tile_mask(const Tensor& mask, int B) {
    const int n = mask.shape[0];
    Tensor out({B, n, n});
    for (int b = 0; b < B; ++b)
        std::copy(mask.v.begin(), mask.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(b) * n * n);
    return out;
}

class BiRnnLite final : public BaseModel {
public:
    BiRnnLite(ModelConfig cfg, std::uint64_t seed) : BaseModel(std::move(cfg)) {
        std::mt19937_64 rng(seed);
        const int in = input_dim(), h = cfg_.hidden, e = cfg_.embed_dim;
        auto add = [&](const std::string& name, std::vector<int> shape, int fi, int fo) {
            Tensor t(std::move(shape));
            ad::glorot_fill(t, fi, fo, rng);
            params_.add(name, std::move(t));
        };
        add("emb_hour", {24, e}, 24, e);
        add("emb_dow", {7, e}, 7, e);
        add("fw_wx", {in, 4 * h}, in, 4 * h);
        add("fw_wh", {h, 4 * h}, h, 4 * h);
        params_.add("fw_b", Tensor({4 * h}));
        add("bw_wx", {in, 4 * h}, in, 4 * h);
        add("bw_wh", {h, 4 * h}, h, 4 * h);
        params_.add("bw_b", Tensor({4 * h}));
        add("out_w", {2 * h, 3}, 2 * h, 3);
        params_.add("out_b", Tensor({3}));
    }

    std::size_t sample_count(const SampleSet& d) const override { return d.n_samples(); }
    bool per_cell() const override { return true; }

    ad::Var build_forward(Graph& g, const SampleSet& data, std::span<const std::size_t> batch,
                          bool with_grad, std::vector<int>& targets,
                          std::vector<std::pair<int, int>>* keys,
                          std::vector<Var>* param_vars) override {
        std::vector<int> cells, taus;
        temporal_batch_rows(data, batch, cells, taus);
        fill_targets_keys(data, cells, taus, targets, keys);

        auto pv = bind_params(g, params_, with_grad);
        if (param_vars) *param_vars = pv;
        const int h = cfg_.hidden;
        const int R = static_cast<int>(cells.size());
        auto xs = make_input_steps(g, data, cells, taus, pv[0], pv[1], cfg_.use_counts);

        auto run_dir = [&](bool forward_dir, Var wx, Var wh, Var b) {
            Var hs = g.constant(Tensor({R, h}));
            Var cs = g.constant(Tensor({R, h}));
            for (int step = 0; step < data.k; ++step) {
                const int t = forward_dir ? step : data.k - 1 - step;
                Var z = g.add_row(g.add(g.matmul(xs[t], wx), g.matmul(hs, wh)), b);
                Var gi = g.sigmoid(g.slice_last(z, 0, h));
                Var gf = g.sigmoid(g.slice_last(z, h, 2 * h));
                Var gg = g.tanh_(g.slice_last(z, 2 * h, 3 * h));
                Var go = g.sigmoid(g.slice_last(z, 3 * h, 4 * h));
                cs = g.add(g.mul(gf, cs), g.mul(gi, gg));
                hs = g.mul(go, g.tanh_(cs));
            }
            return hs;
        };
        Var hf = run_dir(true, pv[2], pv[3], pv[4]);
        Var hb = run_dir(false, pv[5], pv[6], pv[7]);
        Var logits = g.add_row(g.matmul(g.concat_last(hf, hb), pv[8]), pv[9]);
        return g.softmax_last(logits);
    }
};

class TcnLite final : public BaseModel {
public:
    TcnLite(ModelConfig cfg, std::uint64_t seed) : BaseModel(std::move(cfg)) {
        if (cfg_.dilations.empty()) throw std::invalid_argument("tcn: dilations must be non-empty");
        std::mt19937_64 rng(seed);
        const int in = input_dim(), h = cfg_.hidden, e = cfg_.embed_dim, K = cfg_.kernel;
        auto add = [&](const std::string& name, std::vector<int> shape, int fi, int fo) {
            Tensor t(std::move(shape));
            ad::glorot_fill(t, fi, fo, rng);
            params_.add(name, std::move(t));
        };
        add("emb_hour", {24, e}, 24, e);
        add("emb_dow", {7, e}, 7, e);
        add("proj_w", {1, in, h}, in, h);
        for (std::size_t blk = 0; blk < cfg_.dilations.size(); ++blk) {
            const int ci = blk == 0 ? in : h;
            add("conv_w" + std::to_string(blk), {K, ci, h}, K * ci, h);
            params_.add("conv_b" + std::to_string(blk), Tensor({h}));
        }
        add("out_w", {h, 3}, h, 3);
        params_.add("out_b", Tensor({3}));
    }

    int receptive_field() const {
        int rf = 1;
        for (int d : cfg_.dilations) rf += (cfg_.kernel - 1) * d;
        return rf;
    }

    std::size_t sample_count(const SampleSet& d) const override { return d.n_samples(); }
    bool per_cell() const override { return true; }

    ad::Var build_forward(Graph& g, const SampleSet& data, std::span<const std::size_t> batch,
                          bool with_grad, std::vector<int>& targets,
                          std::vector<std::pair<int, int>>* keys,
                          std::vector<Var>* param_vars) override {
        if (data.k < receptive_field())
            throw std::invalid_argument("tcn: window k=" + std::to_string(data.k) +
                                        " is below the receptive field; need k >= " +
                                        std::to_string(receptive_field()));
        std::vector<int> cells, taus;
        temporal_batch_rows(data, batch, cells, taus);
        fill_targets_keys(data, cells, taus, targets, keys);

        auto pv = bind_params(g, params_, with_grad);
        if (param_vars) *param_vars = pv;
        auto xs = make_input_steps(g, data, cells, taus, pv[0], pv[1], cfg_.use_counts);
        Var x = g.stack_time(xs);

        Var z = g.conv1d_causal(x, pv[2], 1);  // 1x1 projection feeding the residual chain
        int p = 3;
        for (std::size_t blk = 0; blk < cfg_.dilations.size(); ++blk) {
            Var in_var = blk == 0 ? x : z;
            Var y = g.relu(
                g.add_row(g.conv1d_causal(in_var, pv[p], cfg_.dilations[blk]), pv[p + 1]));
            z = g.add(y, z);
            p += 2;
        }
        Var last = g.take_time(z, data.k - 1);
        Var logits = g.add_row(g.matmul(last, pv[p]), pv[p + 1]);
        return g.softmax_last(logits);
    }
};

class StgcnLite final : public BaseModel {
public:
    StgcnLite(ModelConfig cfg, const AdjacencyMatrix& adj, std::uint64_t seed)
        : BaseModel(std::move(cfg)), ahat_(normalized_adjacency(adj)) {
        std::mt19937_64 rng(seed);
        const int in = input_dim(), h = cfg_.hidden, e = cfg_.embed_dim, K = cfg_.kernel;
        auto add = [&](const std::string& name, std::vector<int> shape, int fi, int fo) {
            Tensor t(std::move(shape));
            ad::glorot_fill(t, fi, fo, rng);
            params_.add(name, std::move(t));
        };
        add("emb_hour", {24, e}, 24, e);
        add("emb_dow", {7, e}, 7, e);
        add("t1_w", {K, in, h}, K * in, h);
        params_.add("t1_b", Tensor({h}));
        add("g_w", {1, h, h}, h, h);
        params_.add("g_b", Tensor({h}));
        add("t2_w", {K, h, h}, K * h, h);
        params_.add("t2_b", Tensor({h}));
        add("out_w", {h, 3}, h, 3);
        params_.add("out_b", Tensor({3}));
    }

    std::size_t sample_count(const SampleSet& d) const override { return d.target_slots.size(); }
    bool per_cell() const override { return false; }

    ad::Var build_forward(Graph& g, const SampleSet& data, std::span<const std::size_t> batch,
                          bool with_grad, std::vector<int>& targets,
                          std::vector<std::pair<int, int>>* keys,
                          std::vector<Var>* param_vars) override {
        const int S = static_cast<int>(data.n_cells());
        if (ahat_.shape[0] != S)
            throw std::invalid_argument("stgcn: adjacency is " + std::to_string(ahat_.shape[0]) +
                                        " cells but the sample set has " + std::to_string(S));
        std::vector<int> cells, taus;
        spatial_batch_rows(data, batch, cells, taus);
        fill_targets_keys(data, cells, taus, targets, keys);

        auto pv = bind_params(g, params_, with_grad);
        if (param_vars) *param_vars = pv;
        const int B = static_cast<int>(batch.size());
        const int R = B * S;
        const int h = cfg_.hidden;
        auto xs = make_input_steps(g, data, cells, taus, pv[0], pv[1], cfg_.use_counts);
        Var x = g.stack_time(xs);

        Var t1 = g.relu(g.add_row(g.conv1d_causal(x, pv[2], 1), pv[3]));
        Var mixed = t1;
        if (cfg_.spatial_enabled) {
            Var ahat_b = g.constant(tile_mask(ahat_, B));
            std::vector<Var> per_t;
            per_t.reserve(data.k);
            for (int t = 0; t < data.k; ++t) {
                Var ht = g.reshape(g.take_time(t1, t), {B, S, h});
                Var gt = g.reshape(g.bmm(ahat_b, ht), {R, h});
                per_t.push_back(gt);
            }
            mixed = g.stack_time(per_t);
        }
        Var gc = g.relu(g.add_row(g.conv1d_causal(mixed, pv[4], 1), pv[5]));
        Var t2 = g.relu(g.add_row(g.conv1d_causal(gc, pv[6], 1), pv[7]));
        Var last = g.take_time(t2, data.k - 1);
        Var logits = g.add_row(g.matmul(last, pv[8]), pv[9]);
        return g.softmax_last(logits);
    }

private:
    Tensor ahat_;
};

class PdformerLite final : public BaseModel {
public:
    PdformerLite(ModelConfig cfg, const AdjacencyMatrix& adj, const SemanticMatrix& sem,
                 std::uint64_t seed)
        : BaseModel(std::move(cfg)),
          geo_mask_(geo_mask(adj)),
          sem_mask_(semantic_topk_mask(sem, cfg_.kappa)) {
        if (adj.n != sem.n)
            throw std::invalid_argument("pdformer: adjacency / semantic size mismatch");
        std::mt19937_64 rng(seed);
        const int in = input_dim(), d = cfg_.hidden, e = cfg_.embed_dim;
        auto add = [&](const std::string& name, std::vector<int> shape, int fi, int fo) {
            Tensor t(std::move(shape));
            ad::glorot_fill(t, fi, fo, rng);
            params_.add(name, std::move(t));
        };
        add("emb_hour", {24, e}, 24, e);
        add("emb_dow", {7, e}, 7, e);
        add("in_w", {1, in, d}, in, d);
        params_.add("in_b", Tensor({d}));
        add("tq_w", {1, d, d}, d, d);
        add("tk_w", {1, d, d}, d, d);
        add("tv_w", {1, d, d}, d, d);
        params_.add("t_gain", Tensor({d}, std::vector<double>(d, 1.0)));
        params_.add("t_bias", Tensor({d}));
        add("gq_w", {d, d}, d, d);
        add("gk_w", {d, d}, d, d);
        add("gv_w", {d, d}, d, d);
        add("sq_w", {d, d}, d, d);
        add("sk_w", {d, d}, d, d);
        add("sv_w", {d, d}, d, d);
        add("heads_w", {2 * d, d}, 2 * d, d);
        params_.add("s_gain", Tensor({d}, std::vector<double>(d, 1.0)));
        params_.add("s_bias", Tensor({d}));
        add("out_w", {d, 3}, d, 3);
        params_.add("out_b", Tensor({3}));
    }

    std::size_t sample_count(const SampleSet& d) const override { return d.target_slots.size(); }
    bool per_cell() const override { return false; }

    ad::Var build_forward(Graph& g, const SampleSet& data, std::span<const std::size_t> batch,
                          bool with_grad, std::vector<int>& targets,
                          std::vector<std::pair<int, int>>* keys,
                          std::vector<Var>* param_vars) override {
        const int S = static_cast<int>(data.n_cells());
        if (geo_mask_.shape[0] != S)
            throw std::invalid_argument("pdformer: mask is " + std::to_string(geo_mask_.shape[0]) +
                                        " cells but the sample set has " + std::to_string(S));
        std::vector<int> cells, taus;
        spatial_batch_rows(data, batch, cells, taus);
        fill_targets_keys(data, cells, taus, targets, keys);

        auto pv = bind_params(g, params_, with_grad);
        if (param_vars) *param_vars = pv;
        const int B = static_cast<int>(batch.size());
        const int d = cfg_.hidden;
        const int R = B * S;
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));
        auto xs = make_input_steps(g, data, cells, taus, pv[0], pv[1], cfg_.use_counts);
        Var x = g.stack_time(xs);

        Var h0 = g.add_row(g.conv1d_causal(x, pv[2], 1), pv[3]);
        Var q = g.conv1d_causal(h0, pv[4], 1);
        Var kk = g.conv1d_causal(h0, pv[5], 1);
        Var v = g.conv1d_causal(h0, pv[6], 1);
        Var att = g.softmax_last(g.scale(g.bmm_nt(q, kk), att_scale));
        Var h1 = g.layer_norm(g.add(h0, g.bmm(att, v)), pv[7], pv[8]);
        Var h = g.take_time(h1, data.k - 1);  // [R, d]

        Var z;
        if (cfg_.spatial_enabled) {
            auto head = [&](Var wq, Var wkk, Var wv, const Tensor& mask) {
                Var qs = g.reshape(g.matmul(h, wq), {B, S, d});
                Var ks = g.reshape(g.matmul(h, wkk), {B, S, d});
                Var vs = g.reshape(g.matmul(h, wv), {B, S, d});
                Var w = g.masked_softmax(g.scale(g.bmm_nt(qs, ks), att_scale), tile_mask(mask, B));
                return g.reshape(g.bmm(w, vs), {R, d});
            };
            Var head_g = head(pv[9], pv[10], pv[11], geo_mask_);
            Var head_s = head(pv[12], pv[13], pv[14], sem_mask_);
            Var combined = g.matmul(g.concat_last(head_g, head_s), pv[15]);
            z = g.layer_norm(g.add(h, combined), pv[16], pv[17]);
        } else {
            z = g.layer_norm(h, pv[16], pv[17]);
        }
        Var logits = g.add_row(g.matmul(z, pv[18]), pv[19]);
        return g.softmax_last(logits);
    }

private:
    Tensor geo_mask_;
    Tensor sem_mask_;
};

}  // namespace

std::unique_ptr<BaseModel> make_birnn(const ModelConfig& cfg, std::uint64_t seed) {
    return std::make_unique<BiRnnLite>(cfg, seed);
}
std::unique_ptr<BaseModel> make_tcn(const ModelConfig& cfg, std::uint64_t seed) {
    return std::make_unique<TcnLite>(cfg, seed);
}
std::unique_ptr<BaseModel> make_stgcn_lite(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                           std::uint64_t seed) {
    return std::make_unique<StgcnLite>(cfg, adj, seed);
}
std::unique_ptr<BaseModel> make_pdformer_lite(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                              const SemanticMatrix& sem, std::uint64_t seed) {
    return std::make_unique<PdformerLite>(cfg, adj, sem, seed);
}

std::unique_ptr<BaseModel> make_model(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                      const SemanticMatrix& sem, std::uint64_t seed) {
    switch (cfg.kind) {
        case ModelKind::birnn: return make_birnn(cfg, seed);
        case ModelKind::tcn: return make_tcn(cfg, seed);
        case ModelKind::stgcn_lite: return make_stgcn_lite(cfg, adj, seed);
        case ModelKind::pdformer_lite: return make_pdformer_lite(cfg, adj, sem, seed);
    }
    throw std::invalid_argument("make_model: bad kind");
}

namespace {

/// Validation pass: loss and macro F1 without gradients.
std::pair<double, double> validate(BaseModel& model, const SampleSet& val,
                                   const TrainConfig& cfg) {
    const std::size_t n = model.sample_count(val);
    std::vector<int> all_pred, all_true;
    double loss_sum = 0.0;
    std::size_t loss_rows = 0;
    Graph g;
    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        std::vector<std::size_t> batch(end - start);
        std::iota(batch.begin(), batch.end(), start);
        g.clear();
        std::vector<int> targets;
        Var probs = model.build_forward(g, val, batch, false, targets, nullptr, nullptr);
        Var loss = g.weighted_nll(probs, targets, {cfg.class_weights[0], cfg.class_weights[1],
                                                   cfg.class_weights[2]});
        const auto& pt = g.val(probs);
        const int rows = pt.dim(0);
        loss_sum += g.scalar(loss) * rows;
        loss_rows += rows;
        for (int r = 0; r < rows; ++r) {
            int best = 0;
            for (int c = 1; c < 3; ++c)
                if (pt.v[static_cast<std::size_t>(r) * 3 + c] >=
                    pt.v[static_cast<std::size_t>(r) * 3 + best])
                    best = c;
            all_pred.push_back(best);
            all_true.push_back(targets[r]);
        }
    }
    const auto rep = prf(confusion_matrix(all_pred, all_true));
    return {loss_sum / static_cast<double>(std::max<std::size_t>(1, loss_rows)), rep.macro_f1};
}

}  // namespace

TrainResult train_model(BaseModel& model, const SampleSet& train_set, const TrainConfig& cfg) {
    if (train_set.target_slots.empty()) throw std::invalid_argument("train_model: empty train set");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_model: batch_size must be >= 1");

    // Chronological tail of the train slots is the validation slice.
    SampleSet fit = train_set;
    SampleSet val = train_set;
    {
        const std::size_t n = train_set.target_slots.size();
        std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(n));
        n_val = std::min(std::max<std::size_t>(1, n_val), n - 1);
        fit.target_slots.assign(train_set.target_slots.begin(),
                                train_set.target_slots.end() - static_cast<std::ptrdiff_t>(n_val));
        val.target_slots.assign(train_set.target_slots.end() - static_cast<std::ptrdiff_t>(n_val),
                                train_set.target_slots.end());
    }

    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    ad::AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    ad::AdamState adam = ad::AdamState::init(model.params(), adam_cfg);
    const std::vector<double> w = {cfg.class_weights[0], cfg.class_weights[1], cfg.class_weights[2]};

    // batch_size counts rows; an all-cells sample already spans n_cells rows.
    const std::size_t rows_per_sample = model.per_cell() ? 1 : std::max<std::size_t>(1, fit.n_cells());
    const std::size_t samples_per_batch =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.batch_size) / rows_per_sample);

    std::vector<std::size_t> order(model.sample_count(fit));
    std::iota(order.begin(), order.end(), 0);

    TrainResult res;
    std::vector<Tensor> best;
    double best_val_loss = std::numeric_limits<double>::infinity();
    Graph g;
    std::vector<int> targets;
    std::vector<Var> pvars;
    std::vector<Tensor> grads(model.params().size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t rows_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += samples_per_batch) {
            const std::size_t end = std::min(order.size(), start + samples_per_batch);
            std::span<const std::size_t> batch(order.data() + start, end - start);
            g.clear();
            targets.clear();
            Var probs = model.build_forward(g, fit, batch, true, targets, nullptr, &pvars);
            Var loss = g.weighted_nll(probs, targets, w);
            const double lv = g.scalar(loss);
            if (!std::isfinite(lv))
                throw std::runtime_error("train_model: loss diverged (" + to_string(model.config().kind) +
                                         ", epoch " + std::to_string(epoch) + ")");
            loss_sum += lv * static_cast<double>(targets.size());
            rows_sum += targets.size();
            g.backward(loss);
            for (std::size_t i = 0; i < pvars.size(); ++i) {
                if (g.has_grad(pvars[i]))
                    grads[i] = g.grad(pvars[i]);
                else  // a disabled stage left the parameter out of the graph
                    grads[i] = Tensor(model.params()[static_cast<int>(i)].value.shape);
            }
            adam_step(model.params(), grads, adam);
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, rows_sum));
        std::tie(st.val_loss, st.val_macro_f1) = validate(model, val, cfg);
        res.history.push_back(st);

        // Macro-F1 ties are broken by validation loss so plateaus still refine
        // the retained checkpoint.
        const bool improved =
            res.best_epoch < 0 || st.val_macro_f1 > res.best_val_macro_f1 ||
            (st.val_macro_f1 == res.best_val_macro_f1 && st.val_loss < best_val_loss);
        if (improved) {
            res.best_epoch = epoch;
            res.best_val_macro_f1 = st.val_macro_f1;
            best_val_loss = st.val_loss;
            best.clear();
            for (const auto& p : model.params().all()) best.push_back(p.value);
        } else if (epoch - res.best_epoch >= cfg.patience) {
            break;
        }
    }
    for (std::size_t i = 0; i < best.size(); ++i) model.params()[static_cast<int>(i)].value = best[i];
    return res;
}

ProbTensor predict(BaseModel& model, const SampleSet& data, int batch_rows) {
    ProbTensor out;
    Graph g;
    std::vector<int> targets;

    if (model.per_cell()) {
        // Per-cell model: emit rows slot-major to align with spatial models.
        const std::size_t n_t = data.target_slots.size();
        std::vector<std::size_t> batch;
        for (std::size_t ti = 0; ti < n_t; ++ti) {
            for (std::size_t cell = 0; cell < data.n_cells(); ++cell)
                batch.push_back(cell * n_t + ti);
            if (batch.size() >= static_cast<std::size_t>(batch_rows) || ti + 1 == n_t) {
                g.clear();
                std::vector<std::pair<int, int>> keys;
                Var probs = model.build_forward(g, data, batch, false, targets, &keys, nullptr);
                const auto& pt = g.val(probs);
                for (int r = 0; r < pt.dim(0); ++r) {
                    out.rows.push_back({pt.v[static_cast<std::size_t>(r) * 3],
                                        pt.v[static_cast<std::size_t>(r) * 3 + 1],
                                        pt.v[static_cast<std::size_t>(r) * 3 + 2]});
                    out.keys.push_back(keys[r]);
                }
                batch.clear();
            }
        }
        return out;
    }

    // All-cells model: one sample per target slot, already slot-major.
    const int S = std::max<int>(1, static_cast<int>(data.n_cells()));
    const std::size_t slots_per_batch =
        std::max<std::size_t>(1, static_cast<std::size_t>(batch_rows) / static_cast<std::size_t>(S));
    for (std::size_t start = 0; start < data.target_slots.size(); start += slots_per_batch) {
        const std::size_t end = std::min(data.target_slots.size(), start + slots_per_batch);
        std::vector<std::size_t> batch(end - start);
        std::iota(batch.begin(), batch.end(), start);
        g.clear();
        std::vector<std::pair<int, int>> keys;
        Var probs = model.build_forward(g, data, batch, false, targets, &keys, nullptr);
        const auto& pt = g.val(probs);
        for (int r = 0; r < pt.dim(0); ++r) {
            out.rows.push_back({pt.v[static_cast<std::size_t>(r) * 3],
                                pt.v[static_cast<std::size_t>(r) * 3 + 1],
                                pt.v[static_cast<std::size_t>(r) * 3 + 2]});
            out.keys.push_back(keys[r]);
        }
    }
    return out;
}

void write_history_csv(const std::string& path, const TrainResult& result) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,train_loss,val_loss,val_macro_f1\n";
    out.precision(9);
    for (const auto& e : result.history)
        out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_macro_f1 << '\n';
}

}  // namespace truckcast
