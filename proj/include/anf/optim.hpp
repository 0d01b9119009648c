#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "anf/tensor.hpp"

namespace anf {

/// Cosine-annealed learning rate. lr(0) == base exactly, lr(t >= t_max) == 0
/// exactly, non-increasing in between. t_max == 0 means a constant rate.
struct CosineSchedule {
    double base_lr = 0.01;
    std::int64_t t_max = 0;
    std::int64_t step = 0;

    double lr_at(std::int64_t t) const {
        if (t_max <= 0) return base_lr;
        if (t <= 0) return base_lr;
        if (t >= t_max) return 0.0;
        return base_lr * 0.5 *
               (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                               static_cast<double>(t_max)));
    }

    double current() const { return lr_at(step); }
};

/// SGD-with-momentum state: one velocity buffer per parameter plus the
/// learning-rate schedule.
template <typename S>
struct OptimState {
    double momentum = 0.9;
    CosineSchedule schedule;
    std::vector<std::vector<S>> velocity;

    OptimState() = default;
    OptimState(double momentum_, CosineSchedule schedule_)
        : momentum(momentum_), schedule(schedule_) {}
};

/// One update: v <- momentum * v + g + wd * p ; p <- p - lr * v, then the
/// schedule advances by one step. Every parameter must have a populated
/// gradient.
template <typename S>
void sgd_step(std::vector<Tensor<S>>& params, OptimState<S>& state, double weight_decay) {
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.velocity[i].assign(static_cast<std::size_t>(params[i].size()), S(0));
        }
    }
    if (state.velocity.size() != params.size()) {
        throw ContractError("optimizer state does not match parameter list");
    }
    const double lr = state.schedule.current();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<S>& p = params[i];
        if (!p.has_grad()) {
            throw ContractError("sgd_step: parameter " + std::to_string(i) +
                                " has no gradient");
        }
        std::vector<S>& v = state.velocity[i];
        if (v.size() != static_cast<std::size_t>(p.size())) {
            throw ContractError("momentum buffer shape mismatch for parameter " +
                                std::to_string(i));
        }
        const std::vector<S>& g = p.grad();
        S* pd = p.data();
        for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] = static_cast<S>(state.momentum * v[j] + g[j] + weight_decay * pd[j]);
            pd[j] = static_cast<S>(pd[j] - lr * v[j]);
        }
    }
    ++state.schedule.step;
}

}  // namespace anf
