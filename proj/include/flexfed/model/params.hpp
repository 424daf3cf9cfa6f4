// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "flexfed/model/config.hpp"
#include "flexfed/numerics/tensor.hpp"

namespace flexfed::model {

// Dotted parameter names. Base weights are stored [in, out] so a linear map
// is x * W.
std::string layer_prefix(std::size_t layer);
/// proj in {q, k, v, o}.
std::string attn_name(std::size_t layer, std::string_view proj);
std::string router_name(std::size_t layer);
/// matrix in {gate, up, down}.
std::string expert_name(std::size_t layer, std::size_t expert, std::string_view matrix);
std::string shared_expert_name(std::size_t layer, std::size_t expert, std::string_view matrix);
/// Personalized side expert of a layer; not part of ModelParams.
std::string side_name(std::size_t layer, std::string_view matrix);
std::string side_router_name(std::size_t layer);

inline constexpr std::string_view kExpertMatrices[] = {"gate", "up", "down"};
inline constexpr std::string_view kAttnProjections[] = {"q", "k", "v", "o"};

/// Frozen base weights of the toy MoE transformer.
class ModelParams {
public:
    ModelParams() = default;
    ModelParams(ModelConfig config, std::map<std::string, num::Tensor> tensors);

    /// Random initialization from the (seed, "model", "init") stream. Values
    /// are rounded to f32 so checkpoints hold them exactly.
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    /// Unknown name -> ConfigError.
    [[nodiscard]] const num::Tensor& at(const std::string& name) const;
    [[nodiscard]] const std::map<std::string, num::Tensor>& tensors() const { return tensors_; }
    [[nodiscard]] std::size_t count_params() const;

    /// Deep copy; the result shares no storage with this object.
    [[nodiscard]] ModelParams clone() const;

    /// Flags every base tensor trainable (full-parameter training) or frozen.
    void set_trainable(bool trainable);
    [[nodiscard]] std::vector<num::NamedTensor> named() const;

private:
    ModelConfig config_;
    std::map<std::string, num::Tensor> tensors_;
};

}  // namespace flexfed::model
