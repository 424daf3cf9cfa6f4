// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/model/config.hpp"

#include <cmath>
#include <string>

#include "flexfed/error.hpp"

namespace flexfed::model {

std::size_t ModelConfig::expert_hidden() const {
    const double width = std::round(expert_ratio * static_cast<double>(d_model) * ffn_mult);
    return width < 1.0 ? 1 : static_cast<std::size_t>(width);
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_model < 1) fail("d_model must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
        fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
             std::to_string(n_heads) + ")");
    }
    if (vocab < 2) fail("vocab must be >= 2");
    if (n_experts < 1) fail("n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) {
        fail("top_k must lie in [1, n_experts], got " + std::to_string(top_k));
    }
    if (!(expert_ratio > 0.0) || !(ffn_mult > 0.0)) fail("expert_ratio and ffn_mult must be positive");
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (gate_activation != num::Activation::Sigmoid && gate_activation != num::Activation::Relu &&
        gate_activation != num::Activation::Tanh) {
        fail("gate_activation must be sigmoid, relu or tanh");
    }
    if (!std::isfinite(side_gate_bias)) fail("side_gate_bias must be finite");
}

}  // namespace flexfed::model
