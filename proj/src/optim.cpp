#include "truckcast/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace truckcast::ad {

int ParamStore::add(std::string name, Tensor value) {
    params_.push_back({std::move(name), std::move(value)});
    return static_cast<int>(params_.size()) - 1;
}

std::size_t ParamStore::total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

void ParamStore::save(const std::string& bin_path, const std::string& manifest_path,
                      std::uint64_t seed, std::int64_t step) const {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    nlohmann::json manifest;
    manifest["seed"] = seed;
    manifest["step"] = step;
    auto& list = manifest["params"] = nlohmann::json::array();
    for (const auto& p : params_) {
        bin.write(reinterpret_cast<const char*>(p.value.v.data()),
                  static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
        list.push_back({{"name", p.name}, {"shape", p.value.shape}});
    }
    std::ofstream mf(manifest_path);
    if (!mf) throw std::runtime_error("cannot write " + manifest_path);
    mf << manifest.dump(2) << '\n';
}

void ParamStore::load(const std::string& bin_path, const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("cannot open " + manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    const auto& list = manifest.at("params");
    if (list.size() != params_.size())
        throw std::runtime_error("checkpoint parameter count mismatch for " + bin_path);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto shape = list[i].at("shape").get<std::vector<int>>();
        if (shape != params_[i].value.shape || list[i].at("name") != params_[i].name)
            throw std::runtime_error("checkpoint layout mismatch at parameter " + params_[i].name);
        bin.read(reinterpret_cast<char*>(params_[i].value.v.data()),
                 static_cast<std::streamsize>(params_[i].value.numel() * sizeof(double)));
        if (!bin) throw std::runtime_error("checkpoint truncated: " + bin_path);
    }
}

AdamState AdamState::init(const ParamStore& params, const AdamConfig& cfg) {
    AdamState s;
    s.cfg = cfg;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params.all()) {
        s.m.emplace_back(p.value.shape);
        s.v.emplace_back(p.value.shape);
    }
    return s;
}

void adam_step(ParamStore& params, const std::vector<Tensor>& grads, AdamState& state) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
    state.step += 1;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = params[static_cast<int>(i)].value;
        const Tensor& g = grads[i];
        if (!g.same_shape(w)) throw std::invalid_argument("adam_step: gradient shape mismatch");
        if (!g.all_finite())
            throw std::runtime_error("adam_step: non-finite gradient for parameter " +
                                     params[static_cast<int>(i)].name);
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < w.numel(); ++j) {
            m.v[j] = b1 * m.v[j] + (1.0 - b1) * g.v[j];
            v.v[j] = b2 * v.v[j] + (1.0 - b2) * g.v[j] * g.v[j];
            const double mhat = m.v[j] / bc1;
            const double vhat = v.v[j] / bc2;
            w.v[j] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
        }
    }
}

double finite_diff_check(const std::function<double()>& loss_fn, ParamStore& params,
                         const std::vector<Tensor>& analytic_grads, double eps, std::uint64_t seed,
                         int min_coords) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
    if (analytic_grads.size() != params.size())
        throw std::invalid_argument("finite_diff_check: gradient count mismatch");

    struct Coord {
        std::size_t param;
        std::size_t offset;
    };
    std::vector<Coord> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t j = 0; j < params[static_cast<int>(p)].value.numel(); ++j)
            coords.push_back({p, j});

    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    const std::size_t n_check = std::min<std::size_t>(coords.size(),
                                                      static_cast<std::size_t>(std::max(1, min_coords)));

    double max_rel = 0.0;
    for (std::size_t c = 0; c < n_check; ++c) {
        double& w = params[static_cast<int>(coords[c].param)].value.v[coords[c].offset];
        const double orig = w;
        w = orig + eps;
        const double fp = loss_fn();
        w = orig - eps;
        const double fm = loss_fn();
        w = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double analytic = analytic_grads[coords[c].param].v[coords[c].offset];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
    return max_rel;
}

void glorot_fill(Tensor& t, int fan_in, int fan_out, std::mt19937_64& rng) {
    const double a = glorot_bound(fan_in, fan_out);
    std::uniform_real_distribution<double> dist(-a, a);
    for (double& x : t.v) x = dist(rng);
}

}  // namespace truckcast::ad
