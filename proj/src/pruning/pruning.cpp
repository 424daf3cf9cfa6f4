// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/pruning/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "flexfed/error.hpp"
#include "flexfed/numerics/ops.hpp"

namespace flexfed::pruning {

using num::Tensor;

std::size_t CalibrationBatch::tokens() const {
    std::size_t n = 0;
    for (auto s : segments) n += s;
    return n;
}

std::vector<std::vector<int>> calibration_sequences(const data::Corpus& corpus, std::span<const std::size_t> indices,
                                                    std::size_t max_seq_len, std::size_t count) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < indices.size() && out.size() < count; ++i) {
        out.push_back(data::encode_example(corpus.examples.at(indices[i]), max_seq_len).tokens);
    }
    return out;
}

CalibrationBatch record_moe_inputs(const model::ModelParams& params, const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty()) throw CalibrationError("calibration needs at least one sequence");
    CalibrationBatch calib;
    std::vector<int> tokens;
    for (const auto& s : sequences) {
        if (s.empty()) throw CalibrationError("empty calibration sequence");
        tokens.insert(tokens.end(), s.begin(), s.end());
        calib.segments.push_back(s.size());
    }
    model::ForwardOptions options;
    options.moe_inputs = &calib.layer_inputs;
    (void)model::hidden_forward(tokens, calib.segments, params, options);
    return calib;
}

namespace {

/// Router scores and every routed expert's output on the recorded inputs.
struct LayerCache {
    std::size_t rows = 0, width = 0, experts = 0;
    std::vector<double> scores;                 // [rows, experts]
    std::vector<std::vector<double>> outputs;   // experts x [rows, width]
};

LayerCache build_cache(const model::ModelParams& params, std::size_t layer, const CalibrationBatch& calib) {
    const auto& cfg = params.config();
    if (layer >= calib.layer_inputs.size()) {
        throw DomainError("layer " + std::to_string(layer) + " has no recorded calibration inputs");
    }
    const Tensor& x = calib.layer_inputs[layer];
    LayerCache cache;
    cache.rows = x.dim(0);
    cache.width = x.dim(1);
    cache.experts = cfg.n_experts;
    auto scores = model::router_scores(x, params.at(model::router_name(layer)));
    cache.scores.assign(scores.data().begin(), scores.data().end());
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        auto y = model::expert_ffn(x, params.at(model::expert_name(layer, e, "gate")),
                                   params.at(model::expert_name(layer, e, "up")),
                                   params.at(model::expert_name(layer, e, "down")), nullptr, "", "", "");
        cache.outputs.emplace_back(y.data().begin(), y.data().end());
    }
    return cache;
}

/// Mixture of the top-min(K, |candidates|) candidates by (score desc, index asc).
void mixture(const LayerCache& cache, std::size_t row, std::vector<std::size_t> candidates, std::size_t k,
             bool renormalize, std::vector<double>& out) {
    const double* s = cache.scores.data() + row * cache.experts;
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        return s[a] != s[b] ? s[a] > s[b] : a < b;
    });
    candidates.resize(std::min(k, candidates.size()));
    double norm = 1.0;
    if (renormalize) {
        norm = 0.0;
        for (auto e : candidates) norm += s[e];
    }
    std::fill(out.begin(), out.end(), 0.0);
    for (auto e : candidates) {
        const double g = s[e] / norm;
        const double* y = cache.outputs[e].data() + row * cache.width;
        for (std::size_t c = 0; c < cache.width; ++c) out[c] += g * y[c];
    }
}

std::vector<double> token_errors(const LayerCache& cache, std::span<const std::size_t> subset, std::size_t k,
                                 bool renormalize) {
    if (subset.empty()) throw DomainError("reconstruction loss needs a nonempty expert subset");
    std::vector<std::size_t> chosen(subset.begin(), subset.end());
    std::sort(chosen.begin(), chosen.end());
    chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
    for (auto e : chosen) {
        if (e >= cache.experts) throw DomainError("expert index " + std::to_string(e) + " out of range");
    }
    std::vector<std::size_t> all(cache.experts);
    for (std::size_t e = 0; e < all.size(); ++e) all[e] = e;

    std::vector<double> errors(cache.rows);
    std::vector<double> full(cache.width), part(cache.width);
    for (std::size_t r = 0; r < cache.rows; ++r) {
        mixture(cache, r, all, k, renormalize, full);
        mixture(cache, r, chosen, k, renormalize, part);
        double sq = 0.0;
        for (std::size_t c = 0; c < cache.width; ++c) sq += (part[c] - full[c]) * (part[c] - full[c]);
        errors[r] = std::sqrt(sq);
    }
    return errors;
}

/// Mean of per-sequence Frobenius norms. The norms are summed in sorted
/// order so the result does not depend on the calibration order.
double sequence_mean(std::span<const double> token_errors, std::span<const std::size_t> segments) {
    std::vector<double> norms;
    std::size_t offset = 0;
    for (auto len : segments) {
        double sq = 0.0;
        for (std::size_t i = offset; i < offset + len; ++i) sq += token_errors[i] * token_errors[i];
        norms.push_back(std::sqrt(sq));
        offset += len;
    }
    std::sort(norms.begin(), norms.end());
    double total = 0.0;
    for (double n : norms) total += n;
    return total / static_cast<double>(norms.size());
}

}  // namespace

std::vector<double> token_reconstruction_errors(const model::ModelParams& params, std::size_t layer,
                                                std::span<const std::size_t> subset, const CalibrationBatch& calib) {
    if (subset.empty()) throw DomainError("reconstruction loss needs a nonempty expert subset");
    const auto& cfg = params.config();
    return token_errors(build_cache(params, layer, calib), subset, cfg.top_k, cfg.renormalize_topk);
}

double reconstruction_loss(const model::ModelParams& params, std::size_t layer, std::span<const std::size_t> subset,
                           const CalibrationBatch& calib) {
    const auto errors = token_reconstruction_errors(params, layer, subset, calib);
    return sequence_mean(errors, calib.segments);
}

PruneReport select_personalized_experts(const model::ModelParams& params, const CalibrationBatch& calib,
                                        std::size_t n) {
    if (n != 1) throw DomainError("only single-expert selection (n = 1) is supported");
    const auto& cfg = params.config();
    if (calib.layer_inputs.size() != cfg.n_layers) {
        throw CalibrationError("calibration holds " + std::to_string(calib.layer_inputs.size()) +
                               " layers, model has " + std::to_string(cfg.n_layers));
    }
    PruneReport report;
    report.layers.resize(cfg.n_layers);
    const auto layers = static_cast<long>(cfg.n_layers);
#pragma omp parallel for schedule(static)
    for (long l = 0; l < layers; ++l) {
        const auto cache = build_cache(params, static_cast<std::size_t>(l), calib);
        auto& lr = report.layers[static_cast<std::size_t>(l)];
        for (std::size_t e = 0; e < cfg.n_experts; ++e) {
            const std::size_t single[] = {e};
            lr.losses.push_back(sequence_mean(token_errors(cache, single, cfg.top_k, cfg.renormalize_topk),
                                              calib.segments));
        }
        lr.selected = static_cast<std::size_t>(std::min_element(lr.losses.begin(), lr.losses.end()) - lr.losses.begin());
        double runner_up = std::numeric_limits<double>::infinity();
        for (std::size_t e = 0; e < lr.losses.size(); ++e) {
            if (e != lr.selected) runner_up = std::min(runner_up, lr.losses[e]);
        }
        lr.margin = std::isfinite(runner_up) ? runner_up - lr.losses[lr.selected] : 0.0;
    }
    return report;
}

model::PersonalizedState build_personalized_state(const model::ModelParams& params, const PruneReport& report) {
    const auto& cfg = params.config();
    if (report.layers.size() != cfg.n_layers) {
        throw InvariantViolation("prune report covers " + std::to_string(report.layers.size()) + " layers, model has " +
                                 std::to_string(cfg.n_layers));
    }
    model::PersonalizedState state;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::size_t e = report.layers[l].selected;
        if (e >= cfg.n_experts) {
            throw InvariantViolation("selected expert " + std::to_string(e) + " out of range at layer " +
                                     std::to_string(l));
        }
        model::PersonalizedLayerState layer;
        layer.selected_expert = e;
        layer.gate = params.at(model::expert_name(l, e, "gate")).detach();
        layer.up = params.at(model::expert_name(l, e, "up")).detach();
        layer.down = params.at(model::expert_name(l, e, "down")).detach();
        state.layers.push_back(std::move(layer));
    }
    return state;
}

std::string PruneReport::to_json() const {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        j["layers"].push_back({{"layer", l},
                               {"losses", layers[l].losses},
                               {"selected", layers[l].selected},
                               {"margin", layers[l].margin}});
    }
    return j.dump(2);
}

}  // namespace flexfed::pruning
