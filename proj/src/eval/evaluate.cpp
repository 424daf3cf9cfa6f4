// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/eval/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "flexfed/data/tokenizer.hpp"
#include "flexfed/error.hpp"
#include "flexfed/eval/rouge.hpp"
#include "flexfed/numerics/ops.hpp"

namespace flexfed::eval {

ActivationStats expert_activation_stats(const model::ModelParams& params, const model::ForwardOptions& options,
                                        const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty()) throw StatsError("activation statistics need a nonempty corpus");
    const auto& cfg = params.config();
    ActivationStats stats;
    stats.layers.resize(cfg.n_layers);
    for (auto& l : stats.layers) l.counts.assign(cfg.n_experts, 0);

    for (const auto& seq : sequences) {
        if (seq.empty()) throw StatsError("activation statistics got an empty sequence");
        model::RoutingTrace trace;
        auto opts = options;
        opts.trace = &trace;
        opts.moe_inputs = nullptr;
        const std::size_t len = seq.size();
        (void)model::hidden_forward(seq, std::span<const std::size_t>(&len, 1), params, opts);
        stats.tokens += len;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            for (auto e : trace.experts[l]) ++stats.layers[l].counts[e];
            if (l < trace.side_gates.size()) {
                for (double g : trace.side_gates[l]) {
                    if (g > kSideActivationThreshold) ++stats.layers[l].side;
                }
            }
        }
    }
    for (auto& l : stats.layers) {
        const double n = static_cast<double>(l.counts.size());
        l.mean = static_cast<double>(std::accumulate(l.counts.begin(), l.counts.end(), std::size_t{0})) / n;
        double ss = 0.0;
        for (auto c : l.counts) ss += (static_cast<double>(c) - l.mean) * (static_cast<double>(c) - l.mean);
        l.stddev = std::sqrt(ss / n);
        const auto [lo, hi] = std::minmax_element(l.counts.begin(), l.counts.end());
        l.max_min_ratio = *lo == 0 ? std::numeric_limits<double>::infinity()
                                   : static_cast<double>(*hi) / static_cast<double>(*lo);
    }
    return stats;
}

std::string ActivationStats::to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens;
    j["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& a = layers[l];
        nlohmann::json row = {{"layer", l}, {"counts", a.counts}, {"side", a.side}, {"mean", a.mean},
                              {"stddev", a.stddev}};
        // JSON has no infinity.
        row["max_min_ratio"] = std::isfinite(a.max_min_ratio) ? nlohmann::json(a.max_min_ratio) : nlohmann::json();
        j["layers"].push_back(std::move(row));
    }
    return j.dump(2);
}

std::vector<int> greedy_decode(const model::ModelParams& params, const model::ForwardOptions& options,
                               std::vector<int> prompt, std::size_t max_new_tokens) {
    const std::size_t max_len = params.config().max_seq_len;
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new_tokens && prompt.size() < max_len; ++step) {
        const std::size_t len = prompt.size();
        auto hidden = model::hidden_forward(prompt, std::span<const std::size_t>(&len, 1), params, options);
        const std::size_t last = len - 1;
        auto logits = model::lm_head(num::gather_rows(hidden, std::span<const std::size_t>(&last, 1)), params);
        const auto v = logits.data();
        const int next = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
        if (next == data::kEos) break;
        out.push_back(next);
        prompt.push_back(next);
    }
    return out;
}

double eval_loss(const model::ModelParams& params, const model::ForwardOptions& options,
                 std::span<const data::EncodedExample> encoded) {
    if (encoded.empty()) throw InputError("evaluation set is empty");
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    return model::lm_loss(data::make_batch(encoded, order, true), params, options).item();
}

EvalResult eval_client(const model::ModelParams& params, const model::ForwardOptions& options,
                       std::span<const data::Example> eval_set, const EvalOptions& eval_options) {
    if (eval_set.empty()) throw InputError("evaluation set is empty");
    const std::size_t max_len = params.config().max_seq_len;
    std::vector<data::EncodedExample> encoded;
    for (const auto& e : eval_set) encoded.push_back(data::encode_example(e, max_len));

    EvalResult result;
    result.examples = eval_set.size();
    result.loss = eval_loss(params, options, encoded);

    if (!eval_options.decoder && eval_options.max_new_tokens == 0) return result;
    double total = 0.0;
    for (const auto& e : eval_set) {
        std::string text;
        if (eval_options.decoder) {
            text = eval_options.decoder(e);
        } else {
            std::vector<int> prompt{data::kBos};
            const auto bytes = data::encode_bytes(data::render_alpaca_prompt(e));
            prompt.insert(prompt.end(), bytes.begin(), bytes.end());
            text = data::detokenize(greedy_decode(params, options, std::move(prompt), eval_options.max_new_tokens));
        }
        total += rouge_l(text, e.output, eval_options.rouge_beta).f1;
    }
    result.rouge_f = total / static_cast<double>(eval_set.size());
    return result;
}

}  // namespace flexfed::eval
