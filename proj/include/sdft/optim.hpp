#pragma once

// AdamW with linear warmup / linear decay, two learning-rate groups and
// gradient accumulation.

#include <cmath>
#include <cstddef>
#include <iostream>
#include <vector>

#include "sdft/autodiff.hpp"
#include "sdft/params.hpp"

namespace sdft {

/// Linear ramp 0 -> base_lr over warmup_prop * total_steps, then linear decay to 0 at total_steps.
/// Steps past the end clamp to 0 with a warning on stderr.
inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr, double warmup_prop) {
    if (!(warmup_prop >= 0.0 && warmup_prop < 1.0)) throw ConfigError("warmup proportion must lie in [0, 1)");
    if (step > total_steps) {
        std::cerr << "warning: lr_at step " << step << " beyond total " << total_steps << ", using 0\n";
        return 0.0;
    }
    if (total_steps == 0) return 0.0;
    const double warmup = warmup_prop * double(total_steps);
    const double s = double(step);
    if (s < warmup) return base_lr * s / warmup;
    return base_lr * (double(total_steps) - s) / (double(total_steps) - warmup);
}

struct AdamWConfig {
    double lr_encoder = 1e-3;
    double lr_head = 5e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double warmup_prop = 0.1;

    void validate() const {
        if (!(lr_encoder >= 0 && lr_head >= 0)) throw ConfigError("learning rates must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("Adam eps must be > 0");
        if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
        if (!(warmup_prop >= 0.0 && warmup_prop < 1.0)) throw ConfigError("warmup proportion must lie in [0, 1)");
    }

    friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

template <typename Real>
struct OptimState {
    ParameterSet<Real> m;  // first moments, shaped like the parameters
    ParameterSet<Real> v;  // second moments
    std::size_t step = 0;
    std::size_t total_steps = 0;
    AdamWConfig config;
};

template <typename Real>
OptimState<Real> make_optim_state(const ParameterSet<Real>& params, const AdamWConfig& cfg, std::size_t total_steps) {
    cfg.validate();
    OptimState<Real> st;
    st.m = params.zeros_like();
    st.v = params.zeros_like();
    st.total_steps = total_steps;
    st.config = cfg;
    return st;
}

template <typename Real>
void require_same_names(const ParameterSet<Real>& params, const Gradients<Real>& grads) {
    if (grads.size() != params.size()) {
        throw ContractError("gradient map has " + std::to_string(grads.size()) + " entries for " +
                            std::to_string(params.size()) + " parameters");
    }
    auto g = grads.begin();
    for (const auto& [name, p] : params) {
        if (g->first != name) throw ContractError("gradient name '" + g->first + "' does not match parameter '" + name + "'");
        if (g->second.shape() != p.value.shape()) {
            throw ShapeError("gradient for '" + name + "' has shape " + shape_str(g->second.shape()) + ", parameter " +
                             shape_str(p.value.shape()));
        }
        ++g;
    }
}

/// One decoupled-weight-decay Adam update with explicit per-group learning rates.
template <typename Real>
void adamw_update(ParameterSet<Real>& params, const Gradients<Real>& grads, OptimState<Real>& st, double lr_encoder,
                  double lr_head) {
    require_same_names(params, grads);
    ++st.step;
    const auto& c = st.config;
    const double bc1 = 1.0 - std::pow(c.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, double(st.step));
    auto g = grads.begin();
    auto m = st.m.begin();
    auto v = st.v.begin();
    for (auto& [name, p] : params) {
        const double lr = p.group == ParamGroup::head ? lr_head : lr_encoder;
        const Real* gs = g->second.data();
        Real* ms = m->second.value.data();
        Real* vs = v->second.value.data();
        Real* ps = p.value.data();
        const Real decay = p.decay ? Real(1.0 - lr * c.weight_decay) : Real(1);
        for (std::size_t i = 0, n = p.value.size(); i < n; ++i) {
            ms[i] = Real(c.beta1) * ms[i] + Real(1.0 - c.beta1) * gs[i];
            vs[i] = Real(c.beta2) * vs[i] + Real(1.0 - c.beta2) * gs[i] * gs[i];
            const Real mhat = ms[i] / Real(bc1);
            const Real vhat = vs[i] / Real(bc2);
            ps[i] = ps[i] * decay - Real(lr) * mhat / (std::sqrt(vhat) + Real(c.eps));
        }
        ++g, ++m, ++v;
    }
}

/// Scheduled update: both groups follow lr_at at the new step count.
/// Returns the encoder-group learning rate that was applied.
template <typename Real>
double adamw_step(ParameterSet<Real>& params, const Gradients<Real>& grads, OptimState<Real>& st) {
    const std::size_t next = st.step + 1;
    const double f = lr_at(std::min(next, st.total_steps), st.total_steps, 1.0, st.config.warmup_prop);
    adamw_update(params, grads, st, f * st.config.lr_encoder, f * st.config.lr_head);
    return f * st.config.lr_encoder;
}

/// Elementwise mean of micro-batch gradients.
template <typename Real>
Gradients<Real> accumulate(const std::vector<Gradients<Real>>& micro) {
    if (micro.empty()) throw ContractError("accumulate: no micro-batch gradients");
    Gradients<Real> out = micro.front();
    for (std::size_t k = 1; k < micro.size(); ++k) {
        const auto& gk = micro[k];
        if (gk.size() != out.size()) throw ContractError("accumulate: gradient maps differ in size");
        auto it = gk.begin();
        for (auto& [name, t] : out) {
            if (it->first != name) throw ContractError("accumulate: name mismatch '" + it->first + "' vs '" + name + "'");
            axpy(Real(1), it->second, t);
            ++it;
        }
    }
    if (micro.size() > 1) {
        const Real inv = Real(1) / Real(micro.size());
        for (auto& [_, t] : out) scale_inplace(t, inv);
    }
    return out;
}

}  // namespace sdft
