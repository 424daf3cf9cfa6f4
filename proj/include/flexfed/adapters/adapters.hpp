// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// LoRA adapters addressed by base-parameter name, plus the small trainable
// linears of the personalized gates. Every trainable tensor carries a group
// tag that decides whether it ever leaves the client.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flexfed/model/config.hpp"
#include "flexfed/numerics/rng.hpp"
#include "flexfed/numerics/tensor.hpp"

namespace flexfed::adapters {

enum class ParamGroup {
    SharedAttention,
    LocalExpert,
    LocalGate,
    /// LoRA on the routed/shared experts, uploaded in the dense baseline.
    SharedExpert,
};

std::string_view group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);
[[nodiscard]] bool is_shared(ParamGroup group);

/// Low-rank delta on a base matrix W[in, out]: x*W + (alpha/r) * (x*A^T)*B^T
/// with A[r, in] and B[out, r].
struct LoraAdapter {
    std::string target;
    ParamGroup group = ParamGroup::SharedAttention;
    num::Tensor a;
    num::Tensor b;
    std::size_t rank = 0;
    double alpha = 0.0;

    [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank); }
    [[nodiscard]] std::size_t param_count() const { return a.numel() + b.numel(); }
    /// (alpha/r) * (B*A)^T, i.e. the delta in the [in, out] storage layout.
    [[nodiscard]] num::Tensor delta() const;
};

/// y = x * base + adapter delta (if any).
num::Tensor lora_apply(const num::Tensor& x, const num::Tensor& base_w, const LoraAdapter* adapter);

/// Scalar gate logit x*w + b with w[d,1], b[1]; trained directly.
struct GateLinear {
    std::string target;
    num::Tensor weight;
    num::Tensor bias;

    [[nodiscard]] std::size_t param_count() const { return weight.numel() + bias.numel(); }
};

struct AdapterOptions {
    std::size_t rank = 32;
    double alpha = 64.0;
    double init_std = 0.01;
};

class AdapterSet {
public:
    /// Adds a zero-delta adapter on `target` (shape in x out). Duplicate -> ConfigError.
    void add_lora(const std::string& target, ParamGroup group, std::size_t in, std::size_t out,
                  const AdapterOptions& options, num::RngStream& rng);
    void add_gate(const std::string& target, std::size_t d, double bias);

    [[nodiscard]] const LoraAdapter* find(const std::string& target) const;
    [[nodiscard]] const GateLinear* find_gate(const std::string& target) const;
    [[nodiscard]] const std::map<std::string, LoraAdapter>& lora() const { return lora_; }
    [[nodiscard]] const std::map<std::string, GateLinear>& gates() const { return gates_; }
    [[nodiscard]] bool empty() const { return lora_.empty() && gates_.empty(); }

    /// Trainable tensors in name order: "<target>.lora_A", "<target>.lora_B",
    /// "<target>.weight", "<target>.bias".
    [[nodiscard]] std::vector<num::NamedTensor> parameters() const;
    [[nodiscard]] std::vector<num::NamedTensor> parameters(ParamGroup group) const;
    [[nodiscard]] std::vector<num::NamedTensor> shared_parameters() const;
    [[nodiscard]] ParamGroup group_of(const std::string& param_name) const;

    [[nodiscard]] std::size_t count_params() const;
    [[nodiscard]] std::size_t count_params(ParamGroup group) const;

    /// Deep copy.
    [[nodiscard]] AdapterSet clone() const;

private:
    std::map<std::string, LoraAdapter> lora_;
    std::map<std::string, GateLinear> gates_;
};

/// Which adapter families to create.
struct AdapterTargets {
    bool attention = true;
    /// LoRA on the personalized side expert plus its gate linear.
    bool side_expert = false;
    /// LoRA on every routed and shared expert matrix.
    bool all_experts = false;
};

/// Creates adapters for the requested families. Attention -> SharedAttention,
/// side expert -> LocalExpert, side router -> LocalGate, all experts ->
/// SharedExpert. A draws from (seed, "adapters", "init").
AdapterSet attach_adapters(const model::ModelConfig& config, const AdapterTargets& targets,
                           const AdapterOptions& options, std::uint64_t seed);

/// Same, for an explicit list of target names. Unknown or duplicate -> ConfigError.
AdapterSet attach_adapters(const model::ModelConfig& config, const std::vector<std::string>& targets,
                           const AdapterOptions& options, std::uint64_t seed);

/// Trainable scalar count of a family-level configuration without allocating.
std::size_t count_params(const model::ModelConfig& config, const AdapterTargets& targets,
                         const AdapterOptions& options, std::optional<ParamGroup> group = std::nullopt);

/// Text form: one line per tensor "name group shape hex-f64..." (bitwise round trip).
std::string serialize(const AdapterSet& set);
AdapterSet deserialize(std::string_view text);

}  // namespace flexfed::adapters
