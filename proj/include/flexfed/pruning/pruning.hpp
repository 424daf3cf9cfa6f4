// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Personalized expert selection. Each MoE layer is scored on expert inputs
// recorded in one frozen forward pass; the reconstruction loss compares the
// routed mixture restricted to a subset S with the unrestricted mixture.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flexfed/data/corpus.hpp"
#include "flexfed/model/forward.hpp"
#include "flexfed/model/params.hpp"
#include "flexfed/numerics/tensor.hpp"

namespace flexfed::pruning {

inline constexpr std::size_t kDefaultCalibrationSequences = 16;

struct CalibrationBatch {
    /// Token lengths of the calibration sequences, in recording order.
    std::vector<std::size_t> segments;
    /// Per MoE layer, the expert input rows [sum(segments), d].
    std::vector<num::Tensor> layer_inputs;

    [[nodiscard]] std::size_t tokens() const;
};

/// Full training sequences of the first `count` examples listed in `indices`.
std::vector<std::vector<int>> calibration_sequences(const data::Corpus& corpus, std::span<const std::size_t> indices,
                                                    std::size_t max_seq_len,
                                                    std::size_t count = kDefaultCalibrationSequences);

/// Frozen forward over the sequences, no adapters. No sequences ->
/// CalibrationError.
CalibrationBatch record_moe_inputs(const model::ModelParams& params, const std::vector<std::vector<int>>& sequences);

/// ||F_S(x) - F(x)|| for every calibration token of `layer`. S must be
/// nonempty (DomainError) with indices below n_experts (DomainError).
std::vector<double> token_reconstruction_errors(const model::ModelParams& params, std::size_t layer,
                                                std::span<const std::size_t> subset, const CalibrationBatch& calib);

/// Mean over calibration sequences of the Frobenius norm of F_S - F.
double reconstruction_loss(const model::ModelParams& params, std::size_t layer, std::span<const std::size_t> subset,
                           const CalibrationBatch& calib);

struct LayerReport {
    std::vector<double> losses;  // singleton loss per expert
    std::size_t selected = 0;
    /// Runner-up loss minus selected loss; 0 when there is a single expert.
    double margin = 0.0;
};

struct PruneReport {
    std::vector<LayerReport> layers;

    [[nodiscard]] std::string to_json() const;
};

/// Singleton argmin per layer (ties to the lower index). Only n == 1 is
/// supported; anything else -> DomainError.
PruneReport select_personalized_experts(const model::ModelParams& params, const CalibrationBatch& calib,
                                        std::size_t n = 1);

/// Deep copies of the selected experts. Report shape or index out of range
/// -> InvariantViolation.
model::PersonalizedState build_personalized_state(const model::ModelParams& params, const PruneReport& report);

}  // namespace flexfed::pruning
