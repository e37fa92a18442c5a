#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "truckcast/autodiff.hpp"

namespace truckcast::ad {

struct Param {
    std::string name;
    Tensor value;
};

/// Named parameter set; creation order is the canonical order everywhere
/// (gradients, optimizer state, checkpoints).
class ParamStore {
public:
    int add(std::string name, Tensor value);
    Param& operator[](int i) { return params_[i]; }
    const Param& operator[](int i) const { return params_[i]; }
    std::size_t size() const { return params_.size(); }
    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }
    std::size_t total_scalars() const;

    /// Flat binary values plus a JSON manifest (names, shapes, seed, step).
    void save(const std::string& bin_path, const std::string& manifest_path, std::uint64_t seed,
              std::int64_t step) const;
    /// Loads values for an already-constructed store; shapes must match.
    void load(const std::string& bin_path, const std::string& manifest_path);

private:
    std::vector<Param> params_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::int64_t step = 0;
    std::vector<Tensor> m;  // first moments, one per parameter
    std::vector<Tensor> v;  // second moments

    static AdamState init(const ParamStore& params, const AdamConfig& cfg);
};

/// One bias-corrected Adam update. Gradients must match the store's
/// parameter order; a NaN gradient aborts naming the parameter.
void adam_step(ParamStore& params, const std::vector<Tensor>& grads, AdamState& state);

/// Central-difference check of analytic gradients on a random subsample of
/// at least min_coords coordinates. loss_fn must re-evaluate the scalar loss
/// from the store's current values. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<double()>& loss_fn, ParamStore& params,
                         const std::vector<Tensor>& analytic_grads, double eps, std::uint64_t seed,
                         int min_coords = 100);

/// Uniform(-a, a) fill with a = sqrt(6 / (fan_in + fan_out)).
void glorot_fill(Tensor& t, int fan_in, int fan_out, std::mt19937_64& rng);

}  // namespace truckcast::ad
