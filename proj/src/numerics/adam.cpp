// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/numerics/adam.hpp"

#include <cmath>

#include "flexfed/error.hpp"

namespace flexfed::num {

void adam_update(std::span<double> weights, std::span<const double> grads, AdamMoments& moments,
                 std::uint64_t step, const AdamHyper& hyper) {
    if (grads.size() != weights.size()) throw DimensionError("adam: gradient size differs from parameter size");
    if (moments.m.empty()) {
        moments.m.assign(weights.size(), 0.0);
        moments.v.assign(weights.size(), 0.0);
    }
    if (moments.m.size() != weights.size() || moments.v.size() != weights.size()) {
        throw DimensionError("adam: optimizer state size differs from parameter size");
    }
    const double t = static_cast<double>(step);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double g = grads[i];
        moments.m[i] = hyper.beta1 * moments.m[i] + (1.0 - hyper.beta1) * g;
        moments.v[i] = hyper.beta2 * moments.v[i] + (1.0 - hyper.beta2) * g * g;
        const double m_hat = moments.m[i] / bc1;
        const double v_hat = moments.v[i] / bc2;
        weights[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamHyper& hyper) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) {
            if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient for " + p.name);
        }
    }
    const std::uint64_t step = state.step + 1;
    for (const auto& p : params) {
        Tensor t = p.tensor;
        const auto g = t.grad();
        adam_update(t.mutable_data(), g, state.slots[p.name], step, hyper);
    }
    state.step = step;
}

}  // namespace flexfed::num
