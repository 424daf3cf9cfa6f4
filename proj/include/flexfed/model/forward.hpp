// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward pass of the toy MoE transformer. Sequences are packed into one
// [sum(T), d] matrix; `segments` holds the per-sequence lengths and attention
// never crosses a boundary.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flexfed/adapters/adapters.hpp"
#include "flexfed/model/params.hpp"
#include "flexfed/numerics/tensor.hpp"

namespace flexfed::model {

/// Frozen copy of the expert a client selected for one layer.
struct PersonalizedLayerState {
    std::size_t selected_expert = 0;
    num::Tensor gate;
    num::Tensor up;
    num::Tensor down;
};

/// One entry per MoE layer. The trainable parts (side router, side LoRA)
/// live in the client's AdapterSet under side_router_name / side_name.
struct PersonalizedState {
    std::vector<PersonalizedLayerState> layers;

    [[nodiscard]] bool initialized() const { return !layers.empty(); }
};

struct RoutingTrace {
    /// Per layer, T*K selected expert indices in token order.
    std::vector<std::vector<std::size_t>> experts;
    /// Per layer, the side gate value of every token (FLEx only).
    std::vector<std::vector<double>> side_gates;
};

struct ForwardOptions {
    const adapters::AdapterSet* adapters = nullptr;
    const PersonalizedState* personalized = nullptr;
    RoutingTrace* trace = nullptr;
    /// When set, receives the normalized expert input of every MoE layer.
    std::vector<num::Tensor>* moe_inputs = nullptr;
};

/// Linear map x * W with the adapter registered for `name`, if any.
num::Tensor linear(const num::Tensor& x, const num::Tensor& w, const adapters::AdapterSet* adapters,
                   const std::string& name);

/// Gated SiLU FFN: down(silu(x*gate) * (x*up)).
num::Tensor expert_ffn(const num::Tensor& x, const num::Tensor& gate, const num::Tensor& up,
                       const num::Tensor& down, const adapters::AdapterSet* adapters,
                       const std::string& gate_name, const std::string& up_name, const std::string& down_name);

/// u = h + Attn(LN1(h)) for layer `layer`. A sequence longer than
/// max_seq_len -> SequenceLengthError. See num::causal_attention for
/// shared_prefix.
num::Tensor self_attention_forward(const num::Tensor& h, const ModelParams& params, std::size_t layer,
                                   std::span<const std::size_t> segments, const adapters::AdapterSet* adapters,
                                   std::size_t shared_prefix = 0);

/// softmax(x * router_w) over the expert axis.
num::Tensor router_scores(const num::Tensor& x, const num::Tensor& router_w);

/// h = u + sum_topk g_i FFN_i(x) + sum_shared FFN_s(x) with x = LN2(u).
/// Appends T*K indices to trace->experts when a trace is given.
num::Tensor moe_layer_forward(const num::Tensor& u, const ModelParams& params, std::size_t layer,
                              const adapters::AdapterSet* adapters, RoutingTrace* trace = nullptr,
                              std::vector<num::Tensor>* moe_inputs = nullptr);

/// moe_layer_forward plus g_e * FFN_e(x), g_e = act(router_e(x)). Missing
/// personalized state or side router -> LifecycleError.
num::Tensor flex_moe_forward(const num::Tensor& u, const ModelParams& params, std::size_t layer,
                             const PersonalizedState& personalized, const adapters::AdapterSet* adapters,
                             RoutingTrace* trace = nullptr, std::vector<num::Tensor>* moe_inputs = nullptr);

/// Final hidden states [rows, d] after the last norm. The first
/// shared_prefix rows are a prefix common to every segment, stored once.
num::Tensor hidden_forward(std::span<const int> tokens, std::span<const std::size_t> segments,
                           const ModelParams& params, const ForwardOptions& options = {},
                           std::size_t shared_prefix = 0);

/// LM head applied to the selected rows of `hidden`.
num::Tensor lm_head(const num::Tensor& hidden, const ModelParams& params);

/// Logits [T, V] for one sequence.
num::Tensor model_forward(std::span<const int> tokens, const ModelParams& params,
                          const ForwardOptions& options = {});

/// Packed training batch: targets[i] is the id to predict at position i or
/// -100 when position i carries no loss. When shared_prefix > 0 the first
/// shared_prefix tokens open every sequence and carry no loss; segments then
/// hold the suffix lengths.
struct Batch {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<std::size_t> segments;
    std::size_t shared_prefix = 0;

    [[nodiscard]] std::size_t loss_positions() const;
};

/// Mean next-token cross-entropy over the batch's loss positions. Logits
/// are only materialized at those positions.
num::Tensor lm_loss(const Batch& batch, const ModelParams& params, const ForwardOptions& options = {});

}  // namespace flexfed::model
