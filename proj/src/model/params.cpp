// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/model/params.hpp"

#include <cmath>

#include "flexfed/error.hpp"
#include "flexfed/numerics/rng.hpp"

namespace flexfed::model {

std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer); }

std::string attn_name(std::size_t layer, std::string_view proj) {
    return layer_prefix(layer) + ".attn." + std::string(proj);
}

std::string router_name(std::size_t layer) { return layer_prefix(layer) + ".moe.router"; }

std::string expert_name(std::size_t layer, std::size_t expert, std::string_view matrix) {
    return layer_prefix(layer) + ".moe.experts." + std::to_string(expert) + "." + std::string(matrix);
}

std::string shared_expert_name(std::size_t layer, std::size_t expert, std::string_view matrix) {
    return layer_prefix(layer) + ".moe.shared." + std::to_string(expert) + "." + std::string(matrix);
}

std::string side_name(std::size_t layer, std::string_view matrix) {
    return layer_prefix(layer) + ".side." + std::string(matrix);
}

std::string side_router_name(std::size_t layer) { return layer_prefix(layer) + ".side.router"; }

ModelParams::ModelParams(ModelConfig config, std::map<std::string, num::Tensor> tensors)
    : config_(std::move(config)), tensors_(std::move(tensors)) {
    config_.validate();
}

namespace {

num::Tensor gaussian(const num::RngStream& root, const std::string& name, num::Shape shape, double stddev) {
    auto rng = root.split(name);
    std::vector<double> v(num::shape_numel(shape));
    for (auto& x : v) x = static_cast<double>(static_cast<float>(rng.normal(0.0, stddev)));
    return num::Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const num::RngStream root(seed, "model", "init");
    const std::size_t d = config.d_model, hidden = config.expert_hidden();
    const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double in_h = 1.0 / std::sqrt(static_cast<double>(hidden));

    std::map<std::string, num::Tensor> t;
    t["embed.tok"] = gaussian(root, "embed.tok", {config.vocab, d}, 1.0);
    t["embed.pos"] = gaussian(root, "embed.pos", {config.max_seq_len, d}, 0.1);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const auto p = layer_prefix(l);
        t[p + ".norm1"] = num::Tensor::full({d}, 1.0);
        t[p + ".norm2"] = num::Tensor::full({d}, 1.0);
        for (auto proj : kAttnProjections) t[attn_name(l, proj)] = gaussian(root, attn_name(l, proj), {d, d}, in_d);
        t[router_name(l)] = gaussian(root, router_name(l), {d, config.n_experts}, in_d);
        auto add_expert = [&](auto name_of) {
            t[name_of("gate")] = gaussian(root, name_of("gate"), {d, hidden}, in_d);
            t[name_of("up")] = gaussian(root, name_of("up"), {d, hidden}, in_d);
            t[name_of("down")] = gaussian(root, name_of("down"), {hidden, d}, in_h);
        };
        for (std::size_t e = 0; e < config.n_experts; ++e) {
            add_expert([&](std::string_view m) { return expert_name(l, e, m); });
        }
        for (std::size_t e = 0; e < config.n_shared_experts; ++e) {
            add_expert([&](std::string_view m) { return shared_expert_name(l, e, m); });
        }
    }
    t["final_norm"] = num::Tensor::full({d}, 1.0);
    // Head scale keeps random-init logits near uniform (std ~0.5 after LN).
    if (!config.tie_embeddings) t["lm_head"] = gaussian(root, "lm_head", {d, config.vocab}, 0.5 * in_d);
    return ModelParams(config, std::move(t));
}

const num::Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown model parameter '" + name + "'");
    return it->second;
}

std::size_t ModelParams::count_params() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
}

ModelParams ModelParams::clone() const {
    std::map<std::string, num::Tensor> copy;
    for (const auto& [name, t] : tensors_) copy.emplace(name, t.clone());
    ModelParams out;
    out.config_ = config_;
    out.tensors_ = std::move(copy);
    return out;
}

void ModelParams::set_trainable(bool trainable) {
    for (auto& [_, t] : tensors_) t.set_requires_grad(trainable);
}

std::vector<num::NamedTensor> ModelParams::named() const {
    std::vector<num::NamedTensor> out;
    out.reserve(tensors_.size());
    for (const auto& [name, t] : tensors_) out.push_back({name, t});
    return out;
}

}  // namespace flexfed::model
