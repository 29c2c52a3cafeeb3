#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mamlab/params.hpp"

namespace mamlab {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// First/second moments per parameter, keyed by position in the parameter list.
struct AdamWState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

// One decoupled-weight-decay Adam update at learning rate `lr` over `params`. Every listed
// parameter must hold a gradient; `state` is sized on first use.
inline void adamw_step(const std::vector<NamedParameter*>& params, AdamWState& state, double lr,
                       const AdamWConfig& cfg) {
    if (state.m.empty()) {
        for (const NamedParameter* p : params) {
            state.m.emplace_back(p->tensor.numel(), 0.0);
            state.v.emplace_back(p->tensor.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ContractError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                            " slots for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k]->tensor.has_grad()) throw ContractError("adamw_step: parameter '" + params[k]->name + "' has no gradient");
        if (state.m[k].size() != params[k]->tensor.numel()) {
            throw ContractError("adamw_step: state shape mismatch for '" + params[k]->name + "'");
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& w = params[k]->tensor;
        auto values = w.mutable_data();
        const auto grad = w.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        const double decay = params[k]->decay ? cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            values[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + decay * values[i]);
        }
    }
}

// Linear warmup over the first `warmup_fraction` of steps, then cosine decay to zero.
inline double cosine_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps, double warmup_fraction = 0.05) {
    if (total_steps == 0) return base_lr;
    const auto warmup = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps))));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total_steps <= warmup) return base_lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

} // namespace mamlab
