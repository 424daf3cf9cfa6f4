// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/model/forward.hpp"

#include <algorithm>
#include <numeric>

#include "flexfed/error.hpp"
#include "flexfed/numerics/ops.hpp"

namespace flexfed::model {

using num::Tensor;

namespace {

void check_segments(std::span<const std::size_t> segments, std::size_t rows, std::size_t max_len,
                    std::size_t shared_prefix) {
    if (segments.empty()) throw DimensionError("forward: no sequences");
    std::size_t total = shared_prefix;
    for (auto s : segments) {
        if (s == 0) throw DimensionError("forward: empty sequence");
        if (shared_prefix + s > max_len) {
            throw SequenceLengthError("sequence of " + std::to_string(shared_prefix + s) +
                                      " tokens exceeds max_seq_len " + std::to_string(max_len));
        }
        total += s;
    }
    if (total != rows) throw DimensionError("forward: segment lengths do not sum to the token count");
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const adapters::AdapterSet* adapters, const std::string& name) {
    return adapters::lora_apply(x, w, adapters ? adapters->find(name) : nullptr);
}

Tensor expert_ffn(const Tensor& x, const Tensor& gate, const Tensor& up, const Tensor& down,
                  const adapters::AdapterSet* adapters, const std::string& gate_name, const std::string& up_name,
                  const std::string& down_name) {
    auto g = num::activation(num::Activation::Silu, linear(x, gate, adapters, gate_name));
    auto u = linear(x, up, adapters, up_name);
    return linear(num::mul(g, u), down, adapters, down_name);
}

Tensor self_attention_forward(const Tensor& h, const ModelParams& params, std::size_t layer,
                              std::span<const std::size_t> segments, const adapters::AdapterSet* adapters,
                              std::size_t shared_prefix) {
    const auto& cfg = params.config();
    check_segments(segments, h.dim(0), cfg.max_seq_len, shared_prefix);
    const auto prefix = layer_prefix(layer);
    auto x = num::layer_norm(h, params.at(prefix + ".norm1"));
    auto proj = [&](std::string_view p) {
        const auto name = attn_name(layer, p);
        return linear(x, params.at(name), adapters, name);
    };
    auto attn = num::causal_attention(proj("q"), proj("k"), proj("v"), cfg.n_heads, segments, shared_prefix);
    const auto o_name = attn_name(layer, "o");
    return num::add(h, linear(attn, params.at(o_name), adapters, o_name));
}

Tensor router_scores(const Tensor& x, const Tensor& router_w) { return num::softmax(num::matmul(x, router_w), 1); }

namespace {

/// Routed plus shared expert outputs for normalized input x (no residual).
Tensor expert_mixture(const Tensor& x, const ModelParams& params, std::size_t layer,
                      const adapters::AdapterSet* adapters, RoutingTrace* trace) {
    const auto& cfg = params.config();
    const std::size_t tokens = x.dim(0), n = cfg.n_experts, k = cfg.top_k;
    auto scores = router_scores(x, params.at(router_name(layer)));
    auto gates = num::topk_gate(scores, k, cfg.renormalize_topk);

    std::vector<std::vector<std::size_t>> rows_of(n);
    std::vector<std::size_t> selected;
    selected.reserve(tokens * k);
    const auto sd = scores.data();
    for (std::size_t t = 0; t < tokens; ++t) {
        for (auto e : num::topk_indices(sd.subspan(t * n, n), k)) {
            rows_of[e].push_back(t);
            selected.push_back(e);
        }
    }
    if (trace) trace->experts.push_back(std::move(selected));

    Tensor mix;
    auto accumulate = [&](const Tensor& part) { mix = mix.defined() ? num::add(mix, part) : part; };
    for (std::size_t e = 0; e < n; ++e) {
        const auto& rows = rows_of[e];
        if (rows.empty()) continue;
        const auto gn = expert_name(layer, e, "gate"), un = expert_name(layer, e, "up"),
                   dn = expert_name(layer, e, "down");
        auto xe = rows.size() == tokens ? x : num::gather_rows(x, rows);
        auto ye = expert_ffn(xe, params.at(gn), params.at(un), params.at(dn), adapters, gn, un, dn);
        auto weighted = num::scale_rows(ye, num::take_column(gates, rows, e));
        accumulate(rows.size() == tokens ? weighted : num::scatter_add_rows(weighted, rows, tokens));
    }
    for (std::size_t s = 0; s < cfg.n_shared_experts; ++s) {
        const auto gn = shared_expert_name(layer, s, "gate"), un = shared_expert_name(layer, s, "up"),
                   dn = shared_expert_name(layer, s, "down");
        accumulate(expert_ffn(x, params.at(gn), params.at(un), params.at(dn), adapters, gn, un, dn));
    }
    return mix;
}

Tensor normalized_moe_input(const Tensor& u, const ModelParams& params, std::size_t layer,
                            std::vector<Tensor>* moe_inputs) {
    auto x = num::layer_norm(u, params.at(layer_prefix(layer) + ".norm2"));
    if (moe_inputs) moe_inputs->push_back(x.detach());
    return x;
}

}  // namespace

Tensor moe_layer_forward(const Tensor& u, const ModelParams& params, std::size_t layer,
                         const adapters::AdapterSet* adapters, RoutingTrace* trace, std::vector<Tensor>* moe_inputs) {
    auto x = normalized_moe_input(u, params, layer, moe_inputs);
    return num::add(u, expert_mixture(x, params, layer, adapters, trace));
}

Tensor flex_moe_forward(const Tensor& u, const ModelParams& params, std::size_t layer,
                        const PersonalizedState& personalized, const adapters::AdapterSet* adapters,
                        RoutingTrace* trace, std::vector<Tensor>* moe_inputs) {
    if (layer >= personalized.layers.size()) {
        throw LifecycleError("personalized layer " + std::to_string(layer) + " is not initialized");
    }
    const auto* router = adapters ? adapters->find_gate(side_router_name(layer)) : nullptr;
    if (router == nullptr) throw LifecycleError("side router for layer " + std::to_string(layer) + " is missing");
    const auto& side = personalized.layers[layer];
    if (!side.gate.defined()) throw LifecycleError("side expert for layer " + std::to_string(layer) + " is missing");

    auto x = normalized_moe_input(u, params, layer, moe_inputs);
    auto mix = expert_mixture(x, params, layer, adapters, trace);
    auto logit = num::add_row(num::matmul(x, router->weight), router->bias);
    auto g = num::activation(params.config().gate_activation, logit);
    if (trace) {
        const auto gd = g.data();
        trace->side_gates.emplace_back(gd.begin(), gd.end());
    }
    auto ffn = expert_ffn(x, side.gate, side.up, side.down, adapters, side_name(layer, "gate"),
                          side_name(layer, "up"), side_name(layer, "down"));
    return num::add(u, num::add(mix, num::scale_rows(ffn, g)));
}

Tensor hidden_forward(std::span<const int> tokens, std::span<const std::size_t> segments, const ModelParams& params,
                      const ForwardOptions& options, std::size_t shared_prefix) {
    const auto& cfg = params.config();
    check_segments(segments, tokens.size(), cfg.max_seq_len, shared_prefix);
    std::vector<int> positions;
    positions.reserve(tokens.size());
    for (std::size_t i = 0; i < shared_prefix; ++i) positions.push_back(static_cast<int>(i));
    for (auto s : segments) {
        for (std::size_t i = 0; i < s; ++i) positions.push_back(static_cast<int>(shared_prefix + i));
    }
    auto h = num::add(num::embedding(params.at("embed.tok"), tokens), num::embedding(params.at("embed.pos"), positions));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto u = self_attention_forward(h, params, l, segments, options.adapters, shared_prefix);
        h = options.personalized
                ? flex_moe_forward(u, params, l, *options.personalized, options.adapters, options.trace,
                                   options.moe_inputs)
                : moe_layer_forward(u, params, l, options.adapters, options.trace, options.moe_inputs);
    }
    return num::layer_norm(h, params.at("final_norm"));
}

Tensor lm_head(const Tensor& hidden, const ModelParams& params) {
    if (params.config().tie_embeddings) return num::matmul_bt(hidden, params.at("embed.tok"));
    return num::matmul(hidden, params.at("lm_head"));
}

Tensor model_forward(std::span<const int> tokens, const ModelParams& params, const ForwardOptions& options) {
    const std::size_t segment = tokens.size();
    return lm_head(hidden_forward(tokens, std::span<const std::size_t>(&segment, 1), params, options), params);
}

std::size_t Batch::loss_positions() const {
    return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int t) { return t != -100; }));
}

Tensor lm_loss(const Batch& batch, const ModelParams& params, const ForwardOptions& options) {
    if (batch.targets.size() != batch.tokens.size()) throw DimensionError("lm_loss: targets do not match tokens");
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
        if (batch.targets[i] != -100) {
            rows.push_back(i);
            targets.push_back(batch.targets[i]);
        }
    }
    if (rows.empty()) throw DegenerateBatchError("lm_loss: batch has no loss positions");
    auto hidden = hidden_forward(batch.tokens, batch.segments, params, options, batch.shared_prefix);
    return num::cross_entropy(lm_head(num::gather_rows(hidden, rows), params), targets);
}

}  // namespace flexfed::model
