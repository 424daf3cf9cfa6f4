// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>

#include "flexfed/numerics/ops.hpp"

namespace flexfed::model {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t vocab = 259;
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    std::size_t n_shared_experts = 0;
    /// Expert FFN inner width is round(expert_ratio * d_model * ffn_mult).
    double expert_ratio = 0.25;
    double ffn_mult = 2.75;
    std::size_t max_seq_len = 256;
    num::Activation gate_activation = num::Activation::Sigmoid;
    bool renormalize_topk = false;
    bool tie_embeddings = false;
    /// Initial bias of every personalized router.
    double side_gate_bias = 0.0;

    [[nodiscard]] std::size_t expert_hidden() const;
    [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
};

}  // namespace flexfed::model
