#include "truckcast/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace truckcast::ad {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

MatMap map(Tensor& t, int r, int c) { return MatMap(t.v.data(), r, c); }
CMatMap cmap(const Tensor& t, int r, int c) { return CMatMap(t.v.data(), r, c); }

void ensure(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

constexpr double kNllFloor = 1e-12;

}  // namespace

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double glorot_bound(int fan_in, int fan_out) {
    return std::sqrt(6.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
}

int Graph::push(Node n) {
    const Node* in[3] = {n.a >= 0 ? &nodes_[n.a] : nullptr, n.b >= 0 ? &nodes_[n.b] : nullptr,
                         n.c >= 0 ? &nodes_[n.c] : nullptr};
    for (const Node* p : in)
        if (p && p->needs_grad) n.needs_grad = true;
    for (int id : n.many)
        if (nodes_[id].needs_grad) n.needs_grad = true;
    if (n.op == Op::Leaf && n.requires_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::clear() {
    nodes_.clear();
    clamp_warnings_ = 0;
}

Var Graph::leaf(Tensor t, bool requires_grad) {
    ensure(t.numel() == Tensor::numel_of(t.shape), "leaf: shape/data mismatch");
    ensure(t.all_finite(), "leaf: non-finite values rejected at graph boundary");
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.val = std::move(t);
    return {push(std::move(n))};
}

Var Graph::add(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.same_shape(tb), "add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = ta.v[i] + tb.v[i];
    return {push(std::move(n))};
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.same_shape(tb), "mul: shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = ta.v[i] * tb.v[i];
    return {push(std::move(n))};
}

Var Graph::scale(Var a, double s) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.s0 = s;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = ta.v[i] * s;
    return {push(std::move(n))};
}

Var Graph::add_row(Var a, Var row) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tr = nodes_[row.id].val;
    const int c = ta.last_dim();
    ensure(tr.rank() == 1 && tr.dim(0) == c, "add_row: row shape mismatch");
    Node n;
    n.op = Op::AddRow;
    n.a = a.id;
    n.b = row.id;
    n.val = Tensor(ta.shape);
    const std::size_t rows = ta.rows_flat();
    for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) n.val.v[r * c + j] = ta.v[r * c + j] + tr.v[j];
    return {push(std::move(n))};
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0), "matmul: shape mismatch");
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor({ta.dim(0), tb.dim(1)});
    map(n.val, ta.dim(0), tb.dim(1)).noalias() =
        cmap(ta, ta.dim(0), ta.dim(1)) * cmap(tb, tb.dim(0), tb.dim(1));
    return {push(std::move(n))};
}

Var Graph::matmul_nt(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(1), "matmul_nt: shape mismatch");
    Node n;
    n.op = Op::MatMulNT;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor({ta.dim(0), tb.dim(0)});
    map(n.val, ta.dim(0), tb.dim(0)).noalias() =
        cmap(ta, ta.dim(0), ta.dim(1)) * cmap(tb, tb.dim(0), tb.dim(1)).transpose();
    return {push(std::move(n))};
}

Var Graph::bmm(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) && ta.dim(2) == tb.dim(1),
           "bmm: shape mismatch");
    const int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2), nn = tb.dim(2);
    Node n;
    n.op = Op::Bmm;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor({B, m, nn});
    for (int i = 0; i < B; ++i) {
        CMatMap A(ta.v.data() + static_cast<std::size_t>(i) * m * k, m, k);
        CMatMap Bm(tb.v.data() + static_cast<std::size_t>(i) * k * nn, k, nn);
        MatMap(n.val.v.data() + static_cast<std::size_t>(i) * m * nn, m, nn).noalias() = A * Bm;
    }
    return {push(std::move(n))};
}

Var Graph::bmm_nt(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) && ta.dim(2) == tb.dim(2),
           "bmm_nt: shape mismatch");
    const int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2), nn = tb.dim(1);
    Node n;
    n.op = Op::BmmNT;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor({B, m, nn});
    for (int i = 0; i < B; ++i) {
        CMatMap A(ta.v.data() + static_cast<std::size_t>(i) * m * k, m, k);
        CMatMap Bm(tb.v.data() + static_cast<std::size_t>(i) * nn * k, nn, k);
        MatMap(n.val.v.data() + static_cast<std::size_t>(i) * m * nn, m, nn).noalias() =
            A * Bm.transpose();
    }
    return {push(std::move(n))};
}

Var Graph::concat_last(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].val;
    const Tensor& tb = nodes_[b.id].val;
    ensure(ta.rank() == tb.rank() && ta.rows_flat() == tb.rows_flat(), "concat_last: shape mismatch");
    for (int i = 0; i + 1 < ta.rank(); ++i) ensure(ta.dim(i) == tb.dim(i), "concat_last: leading dims");
    const int ca = ta.last_dim(), cb = tb.last_dim();
    std::vector<int> shape = ta.shape;
    shape.back() = ca + cb;
    Node n;
    n.op = Op::ConcatLast;
    n.a = a.id;
    n.b = b.id;
    n.val = Tensor(shape);
    const std::size_t rows = ta.rows_flat();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(&ta.v[r * ca], ca, &n.val.v[r * (ca + cb)]);
        std::copy_n(&tb.v[r * cb], cb, &n.val.v[r * (ca + cb) + ca]);
    }
    return {push(std::move(n))};
}

Var Graph::slice_last(Var a, int c0, int c1) {
    const Tensor& ta = nodes_[a.id].val;
    const int c = ta.last_dim();
    ensure(0 <= c0 && c0 < c1 && c1 <= c, "slice_last: bad bounds");
    std::vector<int> shape = ta.shape;
    shape.back() = c1 - c0;
    Node n;
    n.op = Op::SliceLast;
    n.a = a.id;
    n.i0 = c0;
    n.i1 = c1;
    n.val = Tensor(shape);
    const std::size_t rows = ta.rows_flat();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(&ta.v[r * c + c0], c1 - c0, &n.val.v[r * (c1 - c0)]);
    return {push(std::move(n))};
}

Var Graph::take_time(Var a, int t) {
    const Tensor& ta = nodes_[a.id].val;
    ensure(ta.rank() == 3 && t >= 0 && t < ta.dim(1), "take_time: bad index");
    const int B = ta.dim(0), T = ta.dim(1), C = ta.dim(2);
    Node n;
    n.op = Op::TakeTime;
    n.a = a.id;
    n.i0 = t;
    n.val = Tensor({B, C});
    for (int b = 0; b < B; ++b)
        std::copy_n(&ta.v[(static_cast<std::size_t>(b) * T + t) * C], C, &n.val.v[static_cast<std::size_t>(b) * C]);
    return {push(std::move(n))};
}

Var Graph::stack_time(const std::vector<Var>& xs) {
    ensure(!xs.empty(), "stack_time: empty input");
    const Tensor& t0 = nodes_[xs[0].id].val;
    ensure(t0.rank() == 2, "stack_time: inputs must be 2-D");
    const int B = t0.dim(0), C = t0.dim(1);
    const int T = static_cast<int>(xs.size());
    Node n;
    n.op = Op::StackTime;
    n.val = Tensor({B, T, C});
    n.many.reserve(xs.size());
    for (int t = 0; t < T; ++t) {
        const Tensor& tt = nodes_[xs[t].id].val;
        ensure(tt.rank() == 2 && tt.dim(0) == B && tt.dim(1) == C, "stack_time: shape mismatch");
        n.many.push_back(xs[t].id);
        for (int b = 0; b < B; ++b)
            std::copy_n(&tt.v[static_cast<std::size_t>(b) * C], C,
                        &n.val.v[(static_cast<std::size_t>(b) * T + t) * C]);
    }
    return {push(std::move(n))};
}

Var Graph::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = nodes_[a.id].val;
    ensure(Tensor::numel_of(shape) == ta.numel(), "reshape: numel mismatch");
    Node n;
    n.op = Op::Reshape;
    n.a = a.id;
    n.val = Tensor(std::move(shape), ta.v);
    return {push(std::move(n))};
}

Var Graph::sigmoid(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::Sigmoid;
    n.a = a.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = 1.0 / (1.0 + std::exp(-ta.v[i]));
    return {push(std::move(n))};
}

Var Graph::tanh_(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::Tanh;
    n.a = a.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = std::tanh(ta.v[i]);
    return {push(std::move(n))};
}

Var Graph::relu(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::Relu;
    n.a = a.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = ta.v[i] > 0.0 ? ta.v[i] : 0.0;
    return {push(std::move(n))};
}

Var Graph::log_(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = std::log(ta.v[i]);
    return {push(std::move(n))};
}

Var Graph::clamp_min(Var a, double floor) {
    const Tensor& ta = nodes_[a.id].val;
    Node n;
    n.op = Op::ClampMin;
    n.a = a.id;
    n.s0 = floor;
    n.val = Tensor(ta.shape);
    for (std::size_t i = 0; i < ta.numel(); ++i) n.val.v[i] = std::max(ta.v[i], floor);
    return {push(std::move(n))};
}

Var Graph::softmax_last(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    const int c = ta.last_dim();
    Node n;
    n.op = Op::SoftmaxLast;
    n.a = a.id;
    n.val = Tensor(ta.shape);
    const std::size_t rows = ta.rows_flat();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ta.v[r * c];
        double* y = &n.val.v[r * c];
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < c; ++j) y[j] /= sum;
    }
    return {push(std::move(n))};
}

Var Graph::masked_softmax(Var a, const Tensor& mask01) {
    const Tensor& ta = nodes_[a.id].val;
    ensure(mask01.numel() == ta.numel(), "masked_softmax: mask shape mismatch");
    const int c = ta.last_dim();
    Node n;
    n.op = Op::MaskedSoftmax;
    n.a = a.id;
    n.aux = mask01.v;
    n.val = Tensor(ta.shape);
    const std::size_t rows = ta.rows_flat();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ta.v[r * c];
        const double* m = &n.aux[r * c];
        double* y = &n.val.v[r * c];
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            if (m[j] > 0.0) mx = std::max(mx, x[j]);
        if (!std::isfinite(mx)) {
            std::fill_n(y, c, 0.0);  // fully masked row
            continue;
        }
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            y[j] = m[j] > 0.0 ? std::exp(x[j] - mx) : 0.0;
            sum += y[j];
        }
        for (int j = 0; j < c; ++j) y[j] /= sum;
    }
    return {push(std::move(n))};
}

Var Graph::embed(Var table, const std::vector<int>& ids) {
    const Tensor& tt = nodes_[table.id].val;
    ensure(tt.rank() == 2, "embed: table must be 2-D");
    const int V = tt.dim(0), d = tt.dim(1);
    Node n;
    n.op = Op::Embed;
    n.a = table.id;
    n.idx = ids;
    n.val = Tensor({static_cast<int>(ids.size()), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ensure(ids[i] >= 0 && ids[i] < V, "embed: index out of range");
        std::copy_n(&tt.v[static_cast<std::size_t>(ids[i]) * d], d, &n.val.v[i * d]);
    }
    return {push(std::move(n))};
}

Var Graph::conv1d_causal(Var x, Var w, int dilation) {
    const Tensor& tx = nodes_[x.id].val;
    const Tensor& tw = nodes_[w.id].val;
    ensure(tx.rank() == 3 && tw.rank() == 3 && tw.dim(1) == tx.dim(2), "conv1d: shape mismatch");
    ensure(dilation >= 1, "conv1d: dilation must be >= 1");
    const int B = tx.dim(0), T = tx.dim(1), Ci = tx.dim(2);
    const int K = tw.dim(0), Co = tw.dim(2);
    Node n;
    n.op = Op::Conv1dCausal;
    n.a = x.id;
    n.b = w.id;
    n.i0 = dilation;
    n.val = Tensor({B, T, Co});
    // y[b,t,o] = sum over taps kk and channels i of w[kk,i,o] * x[b, t-kk*dil, i]
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            double* y = &n.val.v[(static_cast<std::size_t>(b) * T + t) * Co];
            for (int kk = 0; kk < K; ++kk) {
                const int ts = t - kk * dilation;
                if (ts < 0) continue;
                const double* xs = &tx.v[(static_cast<std::size_t>(b) * T + ts) * Ci];
                const double* ws = &tw.v[static_cast<std::size_t>(kk) * Ci * Co];
                for (int i = 0; i < Ci; ++i) {
                    const double xv = xs[i];
                    if (xv == 0.0) continue;
                    const double* wrow = ws + static_cast<std::size_t>(i) * Co;
                    for (int o = 0; o < Co; ++o) y[o] += xv * wrow[o];
                }
            }
        }
    return {push(std::move(n))};
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
    const Tensor& tx = nodes_[x.id].val;
    const Tensor& tg = nodes_[gain.id].val;
    const Tensor& tb = nodes_[bias.id].val;
    const int c = tx.last_dim();
    ensure(tg.rank() == 1 && tg.dim(0) == c && tb.rank() == 1 && tb.dim(0) == c,
           "layer_norm: gain/bias shape mismatch");
    Node n;
    n.op = Op::LayerNorm;
    n.a = x.id;
    n.b = gain.id;
    n.c = bias.id;
    n.val = Tensor(tx.shape);
    const std::size_t rows = tx.rows_flat();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &tx.v[r * c];
        double* yr = &n.val.v[r * c];
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= c;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int j = 0; j < c; ++j) yr[j] = tg.v[j] * ((xr[j] - mean) * inv) + tb.v[j];
    }
    return {push(std::move(n))};
}

Var Graph::mean_all(Var a) {
    const Tensor& ta = nodes_[a.id].val;
    ensure(ta.numel() > 0, "mean_all: empty tensor");
    Node n;
    n.op = Op::MeanAll;
    n.a = a.id;
    n.val = Tensor({1});
    double s = 0.0;
    for (double x : ta.v) s += x;
    n.val.v[0] = s / static_cast<double>(ta.numel());
    return {push(std::move(n))};
}

Var Graph::weighted_nll(Var probs, const std::vector<int>& targets,
                        const std::vector<double>& class_weights) {
    const Tensor& tp = nodes_[probs.id].val;
    ensure(tp.rank() == 2, "weighted_nll: probs must be [N, C]");
    const int N = tp.dim(0), C = tp.dim(1);
    ensure(static_cast<int>(targets.size()) == N, "weighted_nll: target count mismatch");
    ensure(static_cast<int>(class_weights.size()) == C, "weighted_nll: weight count mismatch");
    Node n;
    n.op = Op::WeightedNll;
    n.a = probs.id;
    n.idx = targets;
    n.aux = class_weights;
    n.val = Tensor({1});
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        ensure(targets[i] >= 0 && targets[i] < C, "weighted_nll: target out of range");
        double p = tp.v[static_cast<std::size_t>(i) * C + targets[i]];
        if (p < kNllFloor) {
            p = kNllFloor;
            ++clamp_warnings_;
        }
        loss -= class_weights[targets[i]] * std::log(p);
    }
    n.val.v[0] = loss / static_cast<double>(N);
    return {push(std::move(n))};
}

const Tensor& Graph::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.v.empty()) throw std::logic_error("grad requested before backward reached the node");
    return n.grad;
}

void Graph::backward(Var out) {
    Tensor seed(nodes_[out.id].val.shape);
    std::fill(seed.v.begin(), seed.v.end(), 1.0);
    backward(out, seed);
}

void Graph::backward(Var out, const Tensor& seed) {
    ensure(seed.shape == nodes_[out.id].val.shape, "backward: seed shape mismatch");
    auto touch = [&](int id) -> Tensor& {
        Node& n = nodes_[id];
        if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
        return n.grad;
    };
    {
        Tensor& g = touch(out.id);
        for (std::size_t i = 0; i < seed.numel(); ++i) g.v[i] += seed.v[i];
    }

    for (int id = out.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.grad.v.empty() || !n.needs_grad || n.op == Op::Leaf) continue;
        const Tensor& g = n.grad;
        auto wants = [&](int in_id) { return in_id >= 0 && nodes_[in_id].needs_grad; };

        switch (n.op) {
            case Op::Add: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    for (std::size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * vb.v[i];
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    for (std::size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i] * va.v[i];
                }
                break;
            }
            case Op::Scale: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * n.s0;
                }
                break;
            }
            case Op::AddRow: {
                const int c = n.val.last_dim();
                const std::size_t rows = n.val.rows_flat();
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int j = 0; j < c; ++j) gb.v[j] += g.v[r * c + j];
                }
                break;
            }
            case Op::MatMul: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                const int m = va.dim(0), k = va.dim(1), nn = vb.dim(1);
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    map(ga, m, k).noalias() += cmap(g, m, nn) * cmap(vb, k, nn).transpose();
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    map(gb, k, nn).noalias() += cmap(va, m, k).transpose() * cmap(g, m, nn);
                }
                break;
            }
            case Op::MatMulNT: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                const int m = va.dim(0), k = va.dim(1), nn = vb.dim(0);
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    map(ga, m, k).noalias() += cmap(g, m, nn) * cmap(vb, nn, k);
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    map(gb, nn, k).noalias() += cmap(g, m, nn).transpose() * cmap(va, m, k);
                }
                break;
            }
            case Op::Bmm: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                const int B = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(2);
                for (int i = 0; i < B; ++i) {
                    CMatMap G(g.v.data() + static_cast<std::size_t>(i) * m * nn, m, nn);
                    if (wants(n.a)) {
                        Tensor& ga = touch(n.a);
                        CMatMap Bv(vb.v.data() + static_cast<std::size_t>(i) * k * nn, k, nn);
                        MatMap(ga.v.data() + static_cast<std::size_t>(i) * m * k, m, k).noalias() +=
                            G * Bv.transpose();
                    }
                    if (wants(n.b)) {
                        Tensor& gb = touch(n.b);
                        CMatMap Av(va.v.data() + static_cast<std::size_t>(i) * m * k, m, k);
                        MatMap(gb.v.data() + static_cast<std::size_t>(i) * k * nn, k, nn).noalias() +=
                            Av.transpose() * G;
                    }
                }
                break;
            }
            case Op::BmmNT: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                const int B = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(1);
                for (int i = 0; i < B; ++i) {
                    CMatMap G(g.v.data() + static_cast<std::size_t>(i) * m * nn, m, nn);
                    if (wants(n.a)) {
                        Tensor& ga = touch(n.a);
                        CMatMap Bv(vb.v.data() + static_cast<std::size_t>(i) * nn * k, nn, k);
                        MatMap(ga.v.data() + static_cast<std::size_t>(i) * m * k, m, k).noalias() +=
                            G * Bv;
                    }
                    if (wants(n.b)) {
                        Tensor& gb = touch(n.b);
                        CMatMap Av(va.v.data() + static_cast<std::size_t>(i) * m * k, m, k);
                        MatMap(gb.v.data() + static_cast<std::size_t>(i) * nn * k, nn, k).noalias() +=
                            G.transpose() * Av;
                    }
                }
                break;
            }
            case Op::ConcatLast: {
                const Tensor& va = nodes_[n.a].val;
                const Tensor& vb = nodes_[n.b].val;
                const int ca = va.last_dim(), cb = vb.last_dim();
                const std::size_t rows = va.rows_flat();
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int j = 0; j < ca; ++j) ga.v[r * ca + j] += g.v[r * (ca + cb) + j];
                }
                if (wants(n.b)) {
                    Tensor& gb = touch(n.b);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int j = 0; j < cb; ++j) gb.v[r * cb + j] += g.v[r * (ca + cb) + ca + j];
                }
                break;
            }
            case Op::SliceLast: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const int c = nodes_[n.a].val.last_dim();
                    const int w = n.i1 - n.i0;
                    const std::size_t rows = n.val.rows_flat();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j) ga.v[r * c + n.i0 + j] += g.v[r * w + j];
                }
                break;
            }
            case Op::TakeTime: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const Tensor& va = nodes_[n.a].val;
                    const int B = va.dim(0), T = va.dim(1), C = va.dim(2);
                    for (int b = 0; b < B; ++b)
                        for (int j = 0; j < C; ++j)
                            ga.v[(static_cast<std::size_t>(b) * T + n.i0) * C + j] +=
                                g.v[static_cast<std::size_t>(b) * C + j];
                }
                break;
            }
            case Op::StackTime: {
                const int T = static_cast<int>(n.many.size());
                const int B = n.val.dim(0), C = n.val.dim(2);
                for (int t = 0; t < T; ++t) {
                    if (!nodes_[n.many[t]].needs_grad) continue;
                    Tensor& gt = touch(n.many[t]);
                    for (int b = 0; b < B; ++b)
                        for (int j = 0; j < C; ++j)
                            gt.v[static_cast<std::size_t>(b) * C + j] +=
                                g.v[(static_cast<std::size_t>(b) * T + t) * C + j];
                }
                break;
            }
            case Op::Reshape: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
                }
                break;
            }
            case Op::Sigmoid: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        ga.v[i] += g.v[i] * n.val.v[i] * (1.0 - n.val.v[i]);
                }
                break;
            }
            case Op::Tanh: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        ga.v[i] += g.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
                }
                break;
            }
            case Op::Relu: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const Tensor& va = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        if (va.v[i] > 0.0) ga.v[i] += g.v[i];
                }
                break;
            }
            case Op::Log: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const Tensor& va = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] / va.v[i];
                }
                break;
            }
            case Op::ClampMin: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const Tensor& va = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        if (va.v[i] >= n.s0) ga.v[i] += g.v[i];
                }
                break;
            }
            case Op::SoftmaxLast:
            case Op::MaskedSoftmax: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const int c = n.val.last_dim();
                    const std::size_t rows = n.val.rows_flat();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* y = &n.val.v[r * c];
                        const double* gr = &g.v[r * c];
                        double dot = 0.0;
                        for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
                        for (int j = 0; j < c; ++j) ga.v[r * c + j] += y[j] * (gr[j] - dot);
                    }
                }
                break;
            }
            case Op::Embed: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const int d = n.val.dim(1);
                    for (std::size_t i = 0; i < n.idx.size(); ++i)
                        for (int j = 0; j < d; ++j)
                            ga.v[static_cast<std::size_t>(n.idx[i]) * d + j] += g.v[i * d + j];
                }
                break;
            }
            case Op::Conv1dCausal: {
                const Tensor& vx = nodes_[n.a].val;
                const Tensor& vw = nodes_[n.b].val;
                const int B = vx.dim(0), T = vx.dim(1), Ci = vx.dim(2);
                const int K = vw.dim(0), Co = vw.dim(2);
                const int dil = n.i0;
                const bool wx = wants(n.a), ww = wants(n.b);
                Tensor* gx = wx ? &touch(n.a) : nullptr;
                Tensor* gw = ww ? &touch(n.b) : nullptr;
                for (int b = 0; b < B; ++b)
                    for (int t = 0; t < T; ++t) {
                        const double* gy = &g.v[(static_cast<std::size_t>(b) * T + t) * Co];
                        for (int kk = 0; kk < K; ++kk) {
                            const int ts = t - kk * dil;
                            if (ts < 0) continue;
                            const std::size_t xoff = (static_cast<std::size_t>(b) * T + ts) * Ci;
                            const std::size_t woff = static_cast<std::size_t>(kk) * Ci * Co;
                            for (int i = 0; i < Ci; ++i) {
                                double acc = 0.0;
                                const double* wrow = &vw.v[woff + static_cast<std::size_t>(i) * Co];
                                if (wx) {
                                    for (int o = 0; o < Co; ++o) acc += gy[o] * wrow[o];
                                    gx->v[xoff + i] += acc;
                                }
                                if (ww) {
                                    const double xv = vx.v[xoff + i];
                                    if (xv != 0.0) {
                                        double* gwrow = &gw->v[woff + static_cast<std::size_t>(i) * Co];
                                        for (int o = 0; o < Co; ++o) gwrow[o] += xv * gy[o];
                                    }
                                }
                            }
                        }
                    }
                break;
            }
            case Op::LayerNorm: {
                const Tensor& vx = nodes_[n.a].val;
                const Tensor& vg = nodes_[n.b].val;
                const int c = vx.last_dim();
                const std::size_t rows = vx.rows_flat();
                const bool wxx = wants(n.a), wgg = wants(n.b), wbb = wants(n.c);
                Tensor* gx = wxx ? &touch(n.a) : nullptr;
                Tensor* gg = wgg ? &touch(n.b) : nullptr;
                Tensor* gb = wbb ? &touch(n.c) : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = &vx.v[r * c];
                    const double* gr = &g.v[r * c];
                    double mean = 0.0;
                    for (int j = 0; j < c; ++j) mean += xr[j];
                    mean /= c;
                    double var = 0.0;
                    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= c;
                    const double inv = 1.0 / std::sqrt(var + 1e-5);
                    if (gg || gb) {
                        for (int j = 0; j < c; ++j) {
                            if (gg) gg->v[j] += gr[j] * ((xr[j] - mean) * inv);
                            if (gb) gb->v[j] += gr[j];
                        }
                    }
                    if (gx) {
                        // dxhat = g * gain; standard layer-norm backward
                        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                        for (int j = 0; j < c; ++j) {
                            const double xhat = (xr[j] - mean) * inv;
                            const double dxhat = gr[j] * vg.v[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for (int j = 0; j < c; ++j) {
                            const double xhat = (xr[j] - mean) * inv;
                            const double dxhat = gr[j] * vg.v[j];
                            gx->v[r * c + j] +=
                                inv * (dxhat - sum_dxhat / c - xhat * sum_dxhat_xhat / c);
                        }
                    }
                }
                break;
            }
            case Op::MeanAll: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const double s = g.v[0] / static_cast<double>(ga.numel());
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga.v[i] += s;
                }
                break;
            }
            case Op::WeightedNll: {
                if (wants(n.a)) {
                    Tensor& ga = touch(n.a);
                    const Tensor& vp = nodes_[n.a].val;
                    const int N = vp.dim(0), C = vp.dim(1);
                    const double gs = g.v[0] / static_cast<double>(N);
                    for (int i = 0; i < N; ++i) {
                        const int y = n.idx[i];
                        const double p = vp.v[static_cast<std::size_t>(i) * C + y];
                        if (p >= kNllFloor)
                            ga.v[static_cast<std::size_t>(i) * C + y] -= gs * n.aux[y] / p;
                        // clamped region: zero gradient
                    }
                }
                break;
            }
            case Op::Leaf:
                break;
        }
    }
}

}  // namespace truckcast::ad
