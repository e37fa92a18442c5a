#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "truckcast/autodiff.hpp"
#include "truckcast/features.hpp"
#include "truckcast/optim.hpp"

namespace truckcast {

enum class ModelKind { birnn, tcn, stgcn_lite, pdformer_lite };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
    ModelKind kind = ModelKind::birnn;
    int hidden = 32;
    int kernel = 3;
    std::vector<int> dilations = {1, 2};  // tcn blocks; stgcn uses {1, 1}
    int kappa = 3;                        // semantic neighbor count (pdformer)
    double dropout = 0.0;                 // kept at 0: determinism over regularization
    int embed_dim = 4;                    // hour / day-of-week embedding width
    bool use_counts = false;              // ablation: raw counts instead of one-hot labels
    bool spatial_enabled = true;          // degradation switch for spatial stages
};

struct TrainConfig {
    int batch_size = 16;
    double lr = 1e-3;
    int epochs = 100;
    std::array<double, 3> class_weights = {0.7, 1.2, 1.1};
    std::uint64_t seed = 0;
    int patience = 10;
    double val_fraction = 0.1;  // chronological tail of the train slots
};

/// Per-sample class probabilities aligned on (cell row, target slot),
/// ordered slot-major then cell.
struct ProbTensor {
    std::vector<std::array<double, 3>> rows;
    std::vector<std::pair<int, int>> keys;  // (cell_row, target_slot)
};

/// -w[target] * log(max(p_target, 1e-12)); the per-op contract behind the
/// training loss. Clamps are counted when a counter is supplied.
double weighted_cross_entropy(std::span<const double> prob_row, int target,
                              const std::array<double, 3>& weights,
                              std::size_t* clamp_counter = nullptr);

/// kappa smallest-D(i, j) cells per row (j != i, ties toward lower j);
/// kappa >= cell count is an error.
ad::Tensor semantic_topk_mask(const SemanticMatrix& d, int kappa);

/// Deg^{-1/2} (A + I) Deg^{-1/2} as a dense tensor.
ad::Tensor normalized_adjacency(const AdjacencyMatrix& a);

ad::Tensor geo_mask(const AdjacencyMatrix& a);

class BaseModel {
public:
    virtual ~BaseModel() = default;

    /// Rows a batch of this model's samples expands to and how samples are
    /// enumerated differ between per-cell and all-cells models.
    virtual std::size_t sample_count(const SampleSet& data) const = 0;

    /// True when one sample is a single cell's window (birnn, tcn); false
    /// when one sample is a target slot across all cells (stgcn, pdformer).
    virtual bool per_cell() const = 0;

    /// Builds the forward graph for a batch of sample indices; returns the
    /// probability node [rows, 3], fills one target per row, and optionally
    /// the row keys and the parameter leaf variables (for training).
    virtual ad::Var build_forward(ad::Graph& g, const SampleSet& data,
                                  std::span<const std::size_t> batch, bool with_grad,
                                  std::vector<int>& targets,
                                  std::vector<std::pair<int, int>>* keys,
                                  std::vector<ad::Var>* param_vars) = 0;

    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }

protected:
    explicit BaseModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}
    int input_dim() const { return (cfg_.use_counts ? 1 : 3) + 2 * cfg_.embed_dim; }

    ModelConfig cfg_;
    ad::ParamStore params_;
};

/// Bi-directional gated recurrence over the window; temporal features only.
std::unique_ptr<BaseModel> make_birnn(const ModelConfig& cfg, std::uint64_t init_seed);
/// Dilated causal convolution stack with residuals; temporal features only.
std::unique_ptr<BaseModel> make_tcn(const ModelConfig& cfg, std::uint64_t init_seed);
/// Temporal convolution / graph convolution / temporal convolution sandwich.
std::unique_ptr<BaseModel> make_stgcn_lite(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                           std::uint64_t init_seed);
/// Temporal self-attention plus masked two-head spatial attention
/// (geographic neighbors and kappa semantic neighbors).
std::unique_ptr<BaseModel> make_pdformer_lite(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                              const SemanticMatrix& sem, std::uint64_t init_seed);

std::unique_ptr<BaseModel> make_model(const ModelConfig& cfg, const AdjacencyMatrix& adj,
                                      const SemanticMatrix& sem, std::uint64_t init_seed);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_macro_f1 = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    int best_epoch = -1;
    double best_val_macro_f1 = 0.0;
};

/// Mini-batch Adam on the weighted cross-entropy; keeps the best-validation
/// checkpoint and stops early after `patience` epochs without improvement.
/// Deterministic for a fixed seed.
TrainResult train_model(BaseModel& model, const SampleSet& train_set, const TrainConfig& cfg);

ProbTensor predict(BaseModel& model, const SampleSet& data, int batch_rows = 512);

void write_history_csv(const std::string& path, const TrainResult& result);

}  // namespace truckcast
