// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "flexfed/data/corpus.hpp"
#include "flexfed/data/tokenizer.hpp"
#include "flexfed/error.hpp"
#include "flexfed/eval/evaluate.hpp"
#include "flexfed/eval/ledger.hpp"
#include "flexfed/eval/rouge.hpp"
#include "flexfed/numerics/rng.hpp"
#include "support/lcs_oracle.hpp"

using namespace flexfed;
using namespace flexfed::eval;
using Catch::Approx;

namespace {

std::string join(const std::vector<int>& ids) {
    std::string s;
    for (int x : ids) {
        if (!s.empty()) s += ' ';
        s += static_cast<char>('a' + x);
    }
    return s;
}

std::vector<int> random_ids(num::RngStream& rng, std::size_t max_len, int alphabet) {
    std::vector<int> v(rng.below(max_len + 1));
    for (auto& x : v) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(alphabet)));
    return v;
}

model::ModelConfig tiny_config(std::size_t experts = 4, std::size_t k = 2) {
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_experts = experts;
    c.top_k = k;
    return c;
}

}  // namespace

TEST_CASE("rouge-l hand cases and conventions", "[eval]") {
    auto id = rouge_l("a b c", "a b c");
    CHECK(id.precision == 1.0);
    CHECK(id.recall == 1.0);
    CHECK(id.f1 == 1.0);

    auto s = rouge_l("a b c d", "a c");
    CHECK(s.precision == 0.5);
    CHECK(s.recall == 1.0);
    CHECK(s.f1 == Approx(0.6667).margin(1e-4));

    CHECK(rouge_l("", "").f1 == 1.0);
    CHECK(rouge_l("", "a").f1 == 0.0);
    CHECK(rouge_l("a", "").f1 == 0.0);
    CHECK(rouge_l("x y", "a b").f1 == 0.0);

    // Case and spacing are normalized.
    CHECK(rouge_l("  The CAT\tsat\n", "the cat sat").f1 == 1.0);

    // beta weights recall.
    auto r = rouge_l("a b c d", "a c", 2.0);
    CHECK(r.f1 == Approx(5.0 * 0.5 * 1.0 / (1.0 + 4.0 * 0.5)));
}

TEST_CASE("lcs matches exponential recursion on every short string pair", "[eval]") {
    std::vector<std::vector<int>> all{{}};
    for (std::size_t len = 1; len <= 5; ++len) {
        std::vector<std::vector<int>> next;
        for (const auto& s : all) {
            if (s.size() + 1 != len) continue;
            for (int c = 0; c < 3; ++c) {
                auto t = s;
                t.push_back(c);
                next.push_back(t);
            }
        }
        all.insert(all.end(), next.begin(), next.end());
    }
    REQUIRE(all.size() == 364);
    std::vector<std::vector<std::string>> tokens;
    for (const auto& s : all) tokens.push_back(rouge_tokens(join(s)));
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = 0; j < all.size(); ++j) {
            if (lcs_length(tokens[i], tokens[j]) != flexfed::testing::lcs_recursive(all[i], all[j])) ++mismatches;
        }
    }
    CHECK(mismatches == 0);
}

TEST_CASE("lcs matches the oracle on random strings", "[eval]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        num::RngStream rng(seed, "test", "lcs");
        const auto a = random_ids(rng, 12, 4);
        const auto b = random_ids(rng, 12, 4);
        const auto expected = flexfed::testing::lcs_memo(a, b);
        REQUIRE(lcs_length(rouge_tokens(join(a)), rouge_tokens(join(b))) == expected);

        const auto score = rouge_l(join(a), join(b));
        CHECK(score.f1 >= 0.0);
        CHECK(score.f1 <= 1.0);
        CHECK((score.f1 == 1.0) == (a == b));
    }
}

TEST_CASE("ledger rows carry f32 byte counts", "[eval]") {
    CommLedger ledger;
    CHECK(ledger_summary(ledger).total_params() == 0);
    CHECK(ledger_summary(ledger).up_bytes == 0);

    ledger.record(1, Direction::Down, 0, "shared_attention", 100);
    ledger.record(1, Direction::Up, 0, "shared_attention", 100);
    ledger.record(2, Direction::Up, 1, "shared_attention+shared_expert", 7);
    for (const auto& r : ledger.rows()) CHECK(r.bytes == 4 * r.params);

    const auto s = ledger_summary(ledger);
    CHECK(s.up_params == 107);
    CHECK(s.down_params == 100);
    CHECK(s.up_bytes == 428);
    CHECK(s.params_by_group.at("shared_attention") == 200);

    const auto csv = ledger.to_csv();
    CHECK(csv.rfind("round,direction,client_id,group,params,bytes\n", 0) == 0);
    CHECK(csv.find("2,up,1,shared_attention+shared_expert,7,28\n") != std::string::npos);

    LedgerSummary flex;
    flex.up_params = 10;
    CHECK(comm_ratio(s, flex) == Approx(20.7));
    CHECK(comm_ratio(s, LedgerSummary{}) == 0.0);
}

TEST_CASE("activation counts are conserved", "[eval]") {
    auto c = tiny_config(4, 2);
    auto p = model::ModelParams::init(c, 3);
    num::RngStream rng(3, "test", "corpus");
    std::vector<std::vector<int>> seqs(6);
    std::size_t tokens = 0;
    for (auto& s : seqs) {
        s.resize(5 + rng.below(20));
        for (auto& t : s) t = static_cast<int>(rng.below(256));
        tokens += s.size();
    }
    const auto stats = expert_activation_stats(p, {}, seqs);
    CHECK(stats.tokens == tokens);
    REQUIRE(stats.layers.size() == 2);
    for (const auto& l : stats.layers) {
        CHECK(std::accumulate(l.counts.begin(), l.counts.end(), std::size_t{0}) == tokens * c.top_k);
        CHECK(l.side == 0);
    }
    const auto j = nlohmann::json::parse(stats.to_json());
    CHECK(j["layers"][0]["counts"].size() == 4);

    auto c1 = tiny_config(1, 1);
    const auto single = expert_activation_stats(model::ModelParams::init(c1, 3), {}, seqs);
    CHECK(single.layers[0].stddev == 0.0);
    CHECK(single.layers[0].max_min_ratio == 1.0);

    CHECK_THROWS_AS(expert_activation_stats(p, {}, {}), StatsError);
    CHECK_THROWS_AS(expert_activation_stats(p, {}, {{}}), StatsError);
}

TEST_CASE("near-uniform router spreads load evenly", "[eval]") {
    auto c = tiny_config(4, 1);
    c.n_layers = 1;
    auto p = model::ModelParams::init(c, 9);
    // Zero weights tie every score and the tie-break sends all tokens to the
    // lowest indices, so uniformity needs symmetric columns: orthonormal, so
    // isotropic inputs favour no expert.
    auto router = p.at(model::router_name(0));
    auto w = num::Tensor(router).mutable_data();
    num::RngStream rng(9, "test", "router");
    const std::size_t d = c.d_model, n = c.n_experts;
    for (auto& x : w) x = rng.normal(0.0, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += w[i * n + j] * w[i * n + k];
            for (std::size_t i = 0; i < d; ++i) w[i * n + j] -= dot * w[i * n + k];
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < d; ++i) norm += w[i * n + j] * w[i * n + j];
        for (std::size_t i = 0; i < d; ++i) w[i * n + j] /= std::sqrt(norm);
    }
    std::vector<std::vector<int>> seqs(64);
    for (auto& s : seqs) {
        s.resize(32);
        for (auto& t : s) t = static_cast<int>(rng.below(256));
    }
    const auto stats = expert_activation_stats(p, {}, seqs);
    INFO(stats.to_json());
    CHECK(stats.layers[0].max_min_ratio < 1.5);
}

TEST_CASE("eval_client scores decoders and recomputes the loss", "[eval]") {
    auto c = tiny_config();
    auto p = model::ModelParams::init(c, 5);
    auto corpus = data::synth_tasks(2, 3, 5, "eval");

    EvalOptions copy;
    copy.decoder = [](const data::Example& e) { return e.output; };
    auto r = eval_client(p, {}, corpus.examples, copy);
    CHECK(r.rouge_f.value() == 1.0);
    CHECK(r.examples == 6);

    EvalOptions silent;
    silent.decoder = [](const data::Example&) { return std::string(); };
    CHECK(eval_client(p, {}, corpus.examples, silent).rouge_f.value() == 0.0);

    EvalOptions none;
    none.max_new_tokens = 0;
    CHECK_FALSE(eval_client(p, {}, corpus.examples, none).rouge_f.has_value());

    // Independent recomputation: one sequence at a time, log-softmax in long double.
    long double total = 0.0L;
    std::size_t count = 0;
    for (const auto& e : corpus.examples) {
        const auto enc = data::encode_example(e, c.max_seq_len);
        const auto logits = model::model_forward(enc.tokens, p);
        const std::size_t v = logits.dim(1);
        for (std::size_t i = 0; i < enc.tokens.size(); ++i) {
            if (enc.targets[i] == -100) continue;
            const double* row = logits.data().data() + i * v;
            long double mx = row[0];
            for (std::size_t k = 1; k < v; ++k) mx = std::max<long double>(mx, row[k]);
            long double z = 0.0L;
            for (std::size_t k = 0; k < v; ++k) z += std::exp(static_cast<long double>(row[k]) - mx);
            total += mx + std::log(z) - row[enc.targets[i]];
            ++count;
        }
    }
    CHECK(std::abs(r.loss - static_cast<double>(total / count)) < 1e-10);

    CHECK_THROWS_AS(eval_client(p, {}, {}, copy), InputError);
}

TEST_CASE("greedy decoding follows the argmax", "[eval]") {
    auto c = tiny_config();
    auto p = model::ModelParams::init(c, 6);
    std::vector<int> prompt{data::kBos, 'h', 'i'};
    const auto out = greedy_decode(p, {}, prompt, 6);
    CHECK(out.size() <= 6);
    auto seq = prompt;
    for (int tok : out) {
        const auto logits = model::model_forward(seq, p);
        const std::size_t v = logits.dim(1);
        const double* last = logits.data().data() + (seq.size() - 1) * v;
        int best = 0;
        for (std::size_t k = 1; k < v; ++k) {
            if (last[k] > last[best]) best = static_cast<int>(k);
        }
        CHECK(tok == best);
        seq.push_back(tok);
    }
    CHECK(greedy_decode(p, {}, prompt, 6) == out);
    CHECK(greedy_decode(p, {}, prompt, 0).empty());
}
