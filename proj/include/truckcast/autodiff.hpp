#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace truckcast::ad {

/// Dense 64-bit float tensor, row-major.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel_of(shape), 0.0); }
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {}

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= static_cast<std::size_t>(d);
        return n;
    }
    std::size_t numel() const { return v.size(); }
    int dim(std::size_t i) const { return shape[i]; }
    int rank() const { return static_cast<int>(shape.size()); }
    int last_dim() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows_flat() const { return shape.empty() ? 1 : numel() / static_cast<std::size_t>(last_dim()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Op : std::uint8_t {
    Leaf, Add, Mul, Scale, AddRow, MatMul, MatMulNT, Bmm, BmmNT, ConcatLast, SliceLast,
    TakeTime, StackTime, Reshape, Sigmoid, Tanh, Relu, Log, ClampMin, SoftmaxLast,
    MaskedSoftmax, Embed, Conv1dCausal, LayerNorm, MeanAll, WeightedNll,
};

struct Node {
    Op op = Op::Leaf;
    int a = -1, b = -1, c = -1;   // inputs
    std::vector<int> many;        // StackTime inputs
    Tensor val;
    Tensor grad;                  // empty until touched by backward
    bool needs_grad = false;
    bool requires_grad = false;   // leaves only
    int i0 = 0, i1 = 0;           // op parameters
    double s0 = 0.0;
    std::vector<int> idx;         // Embed / WeightedNll indices
    std::vector<double> aux;      // mask values / class weights
};

/// Define-by-run computation graph: constructing a node evaluates it, so the
/// node order is a topological order and backward is a reverse sweep.
class Graph {
public:
    Var leaf(Tensor t, bool requires_grad);
    Var constant(Tensor t) { return leaf(std::move(t), false); }

    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_row(Var a, Var row);
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a [m,k] x b[n,k]^T -> [m,n]
    Var bmm(Var a, Var b);        // [B,m,k] x [B,k,n]
    Var bmm_nt(Var a, Var b);     // [B,m,k] x [B,n,k]^T
    Var concat_last(Var a, Var b);
    Var slice_last(Var a, int c0, int c1);
    Var take_time(Var a, int t);              // [B,T,C] -> [B,C]
    Var stack_time(const std::vector<Var>& xs);  // T x [B,C] -> [B,T,C]
    Var reshape(Var a, std::vector<int> shape);
    Var sigmoid(Var a);
    Var tanh_(Var a);
    Var relu(Var a);
    Var log_(Var a);
    Var clamp_min(Var a, double floor);
    Var softmax_last(Var a);
    /// Softmax over allowed entries (mask 1 = allowed); fully masked rows
    /// yield all-zero weights instead of NaN.
    Var masked_softmax(Var a, const Tensor& mask01);
    Var embed(Var table, const std::vector<int>& ids);
    Var conv1d_causal(Var x, Var w, int dilation);  // x [B,T,Ci], w [K,Ci,Co]
    Var layer_norm(Var x, Var gain, Var bias);
    Var mean_all(Var a);
    /// Mean over rows of -weights[target] * log(max(p_target, 1e-12)).
    Var weighted_nll(Var probs, const std::vector<int>& targets, const std::vector<double>& class_weights);

    const Tensor& val(Var v) const { return nodes_[v.id].val; }
    const Tensor& grad(Var v) const;
    /// False when backward never reached the node (e.g. a disabled stage
    /// left a parameter out of the graph); such gradients are zero.
    bool has_grad(Var v) const { return !nodes_[v.id].grad.v.empty(); }
    double scalar(Var v) const { return nodes_[v.id].val.v.at(0); }

    /// Reverse sweep from `out` seeded with ones (or an explicit seed of the
    /// same shape), accumulating into every requires_grad leaf.
    void backward(Var out);
    void backward(Var out, const Tensor& seed);

    std::size_t size() const { return nodes_.size(); }
    std::size_t clamp_warnings() const { return clamp_warnings_; }
    void clear();

private:
    int push(Node n);
    std::vector<Node> nodes_;
    std::size_t clamp_warnings_ = 0;

    friend class GraphTestPeek;
};

/// Xavier/Glorot uniform bound sqrt(6 / (fan_in + fan_out)).
double glorot_bound(int fan_in, int fan_out);

}  // namespace truckcast::ad
