// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flexfed/numerics/tensor.hpp"

namespace flexfed::num {

struct AdamHyper {
    double lr = 4e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

struct AdamState {
    std::uint64_t step = 0;
    std::map<std::string, AdamMoments> slots;
};

/// One bias-corrected Adam update of `weights` in place. `step` is the step
/// number after increment (>= 1).
void adam_update(std::span<double> weights, std::span<const double> grads, AdamMoments& moments,
                 std::uint64_t step, const AdamHyper& hyper);

/// Adam step over named parameters, reading each tensor's grad buffer.
/// Every gradient is checked before anything is modified; a NaN/Inf aborts
/// the step with NumericError and leaves params and state untouched.
void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamHyper& hyper);

}  // namespace flexfed::num
