#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "anf/tensor.hpp"

namespace anf {

struct GradCheckReport {
    double max_rel_error = 0.0;
    /// Per-input worst relative error, same order as the input list.
    std::vector<double> per_input;
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` must deterministically map the input list to a scalar loss using
/// only taped ops. The relative error per input tensor is
/// max|analytic - numeric| / max(||analytic||_inf, ||numeric||_inf, 1e-6),
/// so all-zero gradients compare at absolute scale.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& build,
    std::vector<Tensor<double>> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.set_requires_grad(true);

    std::vector<std::vector<double>> analytic(inputs.size());
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        Tensor<double> loss = build(inputs);
        tape.backward(loss);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            analytic[i] = inputs[i].has_grad()
                              ? inputs[i].grad()
                              : std::vector<double>(static_cast<std::size_t>(inputs[i].size()), 0.0);
            inputs[i].zero_grad();
        }
    }

    auto eval = [&]() {
        Tensor<double> loss = build(inputs);
        return loss.item();
    };

    GradCheckReport report;
    report.per_input.resize(inputs.size(), 0.0);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        double max_abs_diff = 0.0;
        double norm_a = 0.0, norm_n = 0.0;
        for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
            double* slot = inputs[i].data() + j;
            const double saved = *slot;
            *slot = saved + h;
            const double up = eval();
            *slot = saved - h;
            const double down = eval();
            *slot = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i][static_cast<std::size_t>(j)];
            max_abs_diff = std::max(max_abs_diff, std::abs(a - numeric));
            norm_a = std::max(norm_a, std::abs(a));
            norm_n = std::max(norm_n, std::abs(numeric));
        }
        report.per_input[i] = max_abs_diff / std::max({norm_a, norm_n, 1e-6});
        report.max_rel_error = std::max(report.max_rel_error, report.per_input[i]);
    }
    return report;
}

}  // namespace anf
