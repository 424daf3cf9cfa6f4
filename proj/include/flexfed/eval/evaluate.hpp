// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flexfed/data/corpus.hpp"
#include "flexfed/model/forward.hpp"

namespace flexfed::eval {

struct LayerActivations {
    /// Routed selections per expert.
    std::vector<std::size_t> counts;
    /// Tokens whose side gate exceeded the threshold (FLEx only).
    std::size_t side = 0;
    double mean = 0.0;
    /// Population standard deviation over the routed experts.
    double stddev = 0.0;
    /// max/min count; infinite when some expert was never selected.
    double max_min_ratio = 0.0;
};

struct ActivationStats {
    std::size_t tokens = 0;
    std::vector<LayerActivations> layers;

    /// {"tokens", "layers": [{"layer", "counts", "side", "mean", "stddev", "max_min_ratio"}]}
    [[nodiscard]] std::string to_json() const;
};

inline constexpr double kSideActivationThreshold = 0.5;

/// Routing histogram of the model over the sequences. No sequences or an
/// empty sequence -> StatsError.
ActivationStats expert_activation_stats(const model::ModelParams& params, const model::ForwardOptions& options,
                                        const std::vector<std::vector<int>>& sequences);

/// Greedy continuation of `prompt` (ties to the lower id), stopping at EOS,
/// after max_new_tokens, or at max_seq_len. EOS is not returned.
std::vector<int> greedy_decode(const model::ModelParams& params, const model::ForwardOptions& options,
                               std::vector<int> prompt, std::size_t max_new_tokens);

using Decoder = std::function<std::string(const data::Example&)>;

struct EvalOptions {
    /// 0 disables generation unless a decoder is supplied.
    std::size_t max_new_tokens = 64;
    double rouge_beta = 1.0;
    /// Replaces greedy decoding when set.
    Decoder decoder;
};

struct EvalResult {
    /// Token-mean teacher-forced cross-entropy over all response positions.
    double loss = 0.0;
    /// Mean ROUGE-L F over the examples, when generation ran.
    std::optional<double> rouge_f;
    std::size_t examples = 0;
};

/// Empty eval set -> InputError.
EvalResult eval_client(const model::ModelParams& params, const model::ForwardOptions& options,
                       std::span<const data::Example> eval_set, const EvalOptions& eval_options = {});

/// Teacher-forced loss only, on pre-encoded examples.
double eval_loss(const model::ModelParams& params, const model::ForwardOptions& options,
                 std::span<const data::EncodedExample> encoded);

}  // namespace flexfed::eval
