// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "flexfed/data/corpus.hpp"
#include "flexfed/data/partition.hpp"
#include "flexfed/data/tokenizer.hpp"
#include "flexfed/error.hpp"
#include "flexfed/model/forward.hpp"
#include "flexfed/numerics/adam.hpp"
#include "flexfed/numerics/rng.hpp"
#include "flexfed/numerics/tape.hpp"

using namespace flexfed;
using namespace flexfed::data;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "flexfed_data_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

double tv_from_uniform(const std::vector<std::size_t>& counts) {
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c);
    double tv = 0.0;
    for (auto c : counts) tv += std::abs(static_cast<double>(c) / total - 1.0 / static_cast<double>(counts.size()));
    return tv / 2.0;
}

}  // namespace

TEST_CASE("tokenizer specials and round trip", "[data]") {
    CHECK(tokenize("") == std::vector<int>{kBos, kEos});
    CHECK(detokenize(tokenize("hello")) == "hello");
    CHECK_THROWS_AS(detokenize(std::vector<int>{1, 259}), DecodeError);
    CHECK_THROWS_AS(detokenize(std::vector<int>{-1}), DecodeError);
    CHECK(detokenize(std::vector<int>{kPad, 'a', kPad}) == "a");
}

TEST_CASE("tokenizer round-trips random byte strings", "[data][property]") {
    for (int seed = 0; seed < 100; ++seed) {
        num::RngStream rng(static_cast<std::uint64_t>(seed), "test", "bytes");
        std::string s(64, '\0');
        for (auto& c : s) c = static_cast<char>(rng.below(256));
        const auto ids = tokenize(s);
        CHECK(ids.size() == 66);
        CHECK(detokenize(ids) == s);
    }
}

TEST_CASE("alpaca prompt matches the golden files", "[data]") {
    const std::filesystem::path golden = std::filesystem::path(FLEXFED_TEST_DATA_DIR) / "golden";
    Example hi{"Say hi", "", "hi", 0};
    CHECK(render_alpaca_prompt(hi) == read_file(golden / "alpaca_say_hi.prompt.txt"));
    CHECK(render_alpaca_training_text(hi) == read_file(golden / "alpaca_say_hi.prompt.txt") + "hi\n");

    Example empty{"", "", "x", 0};
    CHECK(render_alpaca_prompt(empty) == read_file(golden / "alpaca_empty_instruction.prompt.txt"));

    Example with_input{"Sum", "1 2", "3", 0};
    CHECK(render_alpaca_prompt(with_input).find("### Instruction:\nSum\n1 2 \n\n### Response: \n") != std::string::npos);
}

TEST_CASE("loss mask covers the response only", "[data]") {
    Example e{"copy: a b c", "", "a b c", 0};
    const auto enc = encode_example(e, 1024);
    const auto prompt_ids = encode_bytes(render_alpaca_prompt(e));
    const auto full_ids = encode_bytes(render_alpaca_training_text(e));
    // Response tokens recomputed from offsets: training text beyond the prompt, plus EOS.
    const std::size_t expected = full_ids.size() - prompt_ids.size() + 1;
    CHECK(enc.loss_tokens == expected);
    CHECK(enc.tokens.size() == full_ids.size() + 1);
    CHECK(enc.tokens.front() == kBos);
    std::size_t counted = 0;
    for (std::size_t i = 0; i < enc.targets.size(); ++i) {
        if (enc.targets[i] == -100) {
            CHECK(counted == 0);  // all ignored positions come first
            continue;
        }
        ++counted;
    }
    CHECK(counted == expected);
    CHECK(enc.targets.back() == kEos);
    CHECK(detokenize(std::vector<int>(enc.targets.end() - static_cast<std::ptrdiff_t>(expected), enc.targets.end())) ==
          "a b c\n");

    const auto cut = encode_example(e, 20);
    CHECK(cut.tokens.size() == 20);
    CHECK(cut.loss_tokens == 0);
}

TEST_CASE("batches pack examples in order", "[data]") {
    auto corpus = synth_tasks(2, 3, 1);
    std::vector<EncodedExample> enc;
    for (const auto& e : corpus.examples) enc.push_back(encode_example(e, 512));
    std::vector<std::size_t> order{4, 1};
    auto batch = make_batch(enc, order);
    CHECK(batch.segments == std::vector<std::size_t>{enc[4].tokens.size(), enc[1].tokens.size()});
    CHECK(batch.tokens.size() == enc[4].tokens.size() + enc[1].tokens.size());
    CHECK(batch.loss_positions() == enc[4].loss_tokens + enc[1].loss_tokens);
}

TEST_CASE("jsonl loading", "[data]") {
    const auto path = temp_file("three.jsonl");
    write_file(path,
               "{\"instruction\":\"a\",\"input\":\"\",\"output\":\"b\",\"category\":\"qa\"}\n"
               "{\"instruction\":\"c\",\"output\":\"d\",\"category\":\"cls\"}\n"
               "\n"
               "{\"instruction\":\"e\",\"input\":\"f\",\"output\":\"g\"}\n");
    auto ok = load_jsonl(path);
    CHECK(ok.corpus.size() == 3);
    CHECK(ok.rejected.empty());
    CHECK(ok.corpus.label_names == std::vector<std::string>{"cls", "default", "qa"});
    CHECK(ok.corpus.examples[0].task_label == 2);
    CHECK(ok.corpus.examples[2].input == "f");

    const auto bad = temp_file("bad.jsonl");
    write_file(bad,
               "{\"instruction\":\"a\",\"output\":\"b\"}\n"
               "{\"instruction\":\"c\"}\n"
               "not json\n"
               "{\"instruction\":\"x\",\"output\":\"\"}\n");
    auto partial = load_jsonl(bad);
    CHECK(partial.corpus.size() == 1);
    REQUIRE(partial.rejected.size() == 3);
    CHECK(partial.rejected[0].line == 2);
    CHECK(partial.rejected[0].reason.find("output") != std::string::npos);
    CHECK(partial.rejected[1].line == 3);

    CHECK_THROWS_AS(load_jsonl(temp_file("does_not_exist.jsonl")), IoError);
    const auto none = temp_file("none.jsonl");
    write_file(none, "{\"instruction\":\"c\"}\n");
    CHECK_THROWS_AS(load_jsonl(none), EmptyCorpusError);
}

TEST_CASE("jsonl export and import preserve every field", "[data]") {
    auto corpus = synth_tasks(5, 7, 3);
    corpus.examples[2].input = "extra \"quoted\"\ttext\n";
    const auto path = temp_file("roundtrip.jsonl");
    save_jsonl(corpus, path);
    auto back = load_jsonl(path).corpus;
    REQUIRE(back.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& a = corpus.examples[i];
        const auto& b = back.examples[i];
        CHECK(a.instruction == b.instruction);
        CHECK(a.input == b.input);
        CHECK(a.output == b.output);
        CHECK(corpus.label_names[static_cast<std::size_t>(a.task_label)] ==
              back.label_names[static_cast<std::size_t>(b.task_label)]);
    }
}

TEST_CASE("synthetic tasks", "[data]") {
    auto corpus = synth_tasks(4, 50, 7);
    CHECK(corpus.size() == 200);
    std::vector<int> per(4, 0);
    for (const auto& e : corpus.examples) ++per[static_cast<std::size_t>(e.task_label)];
    CHECK(per == std::vector<int>{50, 50, 50, 50});

    auto again = synth_tasks(4, 50, 7);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(corpus.examples[i].instruction == again.examples[i].instruction);
        CHECK(corpus.examples[i].output == again.examples[i].output);
    }
    auto other = synth_tasks(4, 50, 8);
    bool differs = false;
    for (std::size_t i = 0; i < corpus.size(); ++i) differs |= corpus.examples[i].instruction != other.examples[i].instruction;
    CHECK(differs);

    for (const auto& e : synth_tasks(6, 20, 1).examples) {
        const auto colon = e.instruction.find(": ");
        REQUIRE(colon != std::string::npos);
        const std::string letters = e.instruction.substr(colon + 2);
        std::string compact;
        for (char c : letters) {
            if (c != ' ') compact.push_back(c);
        }
        CHECK(compact.size() >= 3);
        CHECK(compact.size() <= 6);
        std::string expected;
        switch (e.task_label) {
            case 0: expected = compact; break;
            case 1: expected.assign(compact.rbegin(), compact.rend()); break;
            case 2:
                for (char c : compact) expected.push_back(static_cast<char>(std::toupper(c)));
                break;
            case 3: CHECK(e.output == std::to_string(compact.size())); continue;
            default:
                for (char c : compact) expected.push_back(static_cast<char>('a' + (c - 'a' + e.task_label - 3) % 8));
        }
        std::string out;
        for (char c : e.output) {
            if (c != ' ') out.push_back(c);
        }
        CHECK(out == expected);
    }
    CHECK(synth_task_name(5) == "shift2");
}

TEST_CASE("pathological partition", "[data]") {
    auto corpus = synth_tasks(4, 10, 1);
    auto p4 = partition_pathological(corpus, 4);
    check_disjoint_cover(p4, corpus.size());
    for (std::size_t c = 0; c < 4; ++c) {
        const auto counts = label_counts(corpus, p4[c]);
        CHECK(counts[c] == 10);
        CHECK(p4[c].size() == 10);
    }
    auto p2 = partition_pathological(corpus, 2);
    auto c0 = label_counts(corpus, p2[0]), c1 = label_counts(corpus, p2[1]);
    CHECK(c0 == std::vector<std::size_t>{10, 0, 10, 0});
    CHECK(c1 == std::vector<std::size_t>{0, 10, 0, 10});
    CHECK(p2[0].size() + p2[1].size() == corpus.size());
    CHECK_THROWS_AS(partition_pathological(corpus, 5), ConfigError);

    auto tasks = assign_eval_tasks(corpus, p4);
    for (std::size_t c = 0; c < 4; ++c) CHECK(tasks[c] == std::vector<int>{static_cast<int>(c)});
}

TEST_CASE("dirichlet partition concentrates at large alpha", "[data]") {
    auto corpus = synth_tasks(4, 250, 2);
    auto p = partition_dirichlet(corpus, 4, 1e6, 11);
    check_disjoint_cover(p, corpus.size());
    for (const auto& client : p) CHECK(tv_from_uniform(label_counts(corpus, client)) <= 0.05);
}

TEST_CASE("dirichlet partition is skewed at small alpha", "[data]") {
    auto corpus = synth_tasks(4, 250, 2);
    auto p = partition_dirichlet(corpus, 10, 0.1, 5);
    check_disjoint_cover(p, corpus.size());
    double best = 0.0;
    for (const auto& client : p) {
        const auto counts = label_counts(corpus, client);
        const double top = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
        best = std::max(best, top / static_cast<double>(client.size()));
    }
    CHECK(best > 0.8);
}

TEST_CASE("every partitioner yields a disjoint cover", "[data][property]") {
    auto corpus = synth_tasks(5, 13, 4);
    for (int seed = 0; seed < 50; ++seed) {
        const auto s = static_cast<std::uint64_t>(seed);
        for (double alpha : {0.05, 0.5, 5.0}) {
            auto p = partition_dirichlet(corpus, 1 + s % 10, alpha, s);
            CHECK_NOTHROW(check_disjoint_cover(p, corpus.size()));
            for (const auto& c : p) CHECK(!c.empty());
            auto again = partition_dirichlet(corpus, 1 + s % 10, alpha, s);
            CHECK(p == again);
        }
        CHECK_NOTHROW(check_disjoint_cover(partition_iid(corpus, 1 + s % 7, s), corpus.size()));
    }
    CHECK_THROWS_AS(partition_dirichlet(synth_tasks(1, 3, 0), 4, 1.0, 0), ConfigError);
    CHECK_THROWS_AS(partition_dirichlet(corpus, 2, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(check_disjoint_cover(Partition{{0, 1}, {1}}, 2), InvariantViolation);
}

TEST_CASE("eval task matching under skewed splits", "[data]") {
    Corpus corpus;
    corpus.label_names = {"a", "b", "c"};
    for (int l : {0, 0, 0, 1, 1, 2, 0}) corpus.examples.push_back({"i", "", "o", l});
    // Client 0 holds most of label 0, client 1 most of 1 and 2, client 2 is left with one label-0 example.
    Partition p{{0, 1, 2}, {3, 4, 5}, {6}};
    auto tasks = assign_eval_tasks(corpus, p);
    CHECK(tasks[0] == std::vector<int>{0});
    CHECK(tasks[1] == std::vector<int>{1, 2});
    CHECK(tasks[2] == std::vector<int>{0});
}

TEST_CASE("partition manifest is valid JSON", "[data]") {
    PartitionSpec spec{PartitionMode::Dirichlet, 0.5, 3, 9};
    auto corpus = synth_tasks(3, 5, 1);
    auto p = make_partition(corpus, spec);
    auto j = nlohmann::json::parse(partition_manifest_json(spec, p));
    CHECK(j["mode"] == "dirichlet");
    CHECK(j["clients"].get<Partition>() == p);
    CHECK(parse_partition_mode("iid") == PartitionMode::Iid);
    CHECK_THROWS_AS(parse_partition_mode("random"), ConfigError);
}

namespace {

double mean_eval_loss(const model::ModelParams& params, const std::vector<EncodedExample>& enc) {
    std::vector<std::size_t> all(enc.size());
    std::iota(all.begin(), all.end(), 0);
    return model::lm_loss(make_batch(enc, all, true), params).item();
}

}  // namespace

TEST_CASE("synthetic tasks are distinguishable by a toy model", "[probe]") {
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    auto params = model::ModelParams::init(cfg, 3);
    params.set_trainable(true);

    auto train = synth_tasks(2, 4000, 1, "train");
    auto held = synth_tasks(2, 16, 1, "eval");
    std::vector<EncodedExample> train0, eval0, eval1;
    for (const auto& e : train.examples) {
        if (e.task_label == 0) train0.push_back(encode_example(e, cfg.max_seq_len));
    }
    for (const auto& e : held.examples) {
        (e.task_label == 0 ? eval0 : eval1).push_back(encode_example(e, cfg.max_seq_len));
    }

    constexpr std::size_t kBatch = 16;
    num::AdamState state;
    num::AdamHyper hyper;
    hyper.lr = 2e-3;
    num::RngStream rng(1, "test", "probe");
    const auto named = params.named();
    std::vector<std::size_t> order(train0.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per_epoch = order.size() / kBatch;
    for (std::size_t step = 0; step < 900; ++step) {
        if (step % per_epoch == 0) rng.shuffle(std::span<std::size_t>(order));
        const std::span<const std::size_t> pick(order.data() + (step % per_epoch) * kBatch, kBatch);
        for (auto p : named) p.tensor.zero_grad();
        num::Tape tape;
        num::TapeScope scope(tape);
        auto loss = model::lm_loss(make_batch(train0, pick, true), params);
        tape.backward(loss);
        num::adam_step(named, state, hyper);
    }
    const double loss0 = mean_eval_loss(params, eval0);
    const double loss1 = mean_eval_loss(params, eval1);
    INFO("task0 " << loss0 << " task1 " << loss1);
    CHECK(loss0 < 0.1);
    CHECK(loss1 > 1.0);
}

TEST_CASE("shared-prefix packing leaves loss and gradients unchanged", "[data]") {
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_experts = 4;
    auto params = model::ModelParams::init(cfg, 5);
    params.set_trainable(true);
    auto corpus = synth_tasks(2, 4, 9);
    std::vector<EncodedExample> enc;
    for (const auto& e : corpus.examples) enc.push_back(encode_example(e, cfg.max_seq_len));

    for (const std::vector<std::size_t>& order : {std::vector<std::size_t>{0, 1, 2}, std::vector<std::size_t>{1, 6, 3, 7}}) {
        auto run = [&](bool share) {
            const auto batch = make_batch(enc, order, share);
            for (auto p : params.named()) p.tensor.zero_grad();
            num::Tape tape;
            num::TapeScope scope(tape);
            auto loss = model::lm_loss(batch, params);
            tape.backward(loss);
            std::vector<double> grads;
            for (const auto& p : params.named()) {
                const auto g = p.tensor.grad();
                grads.insert(grads.end(), g.begin(), g.end());
            }
            return std::make_pair(loss.item(), grads);
        };
        const auto plain = run(false);
        const auto shared = run(true);
        CHECK(make_batch(enc, order, true).shared_prefix > 100);
        CHECK(std::abs(plain.first - shared.first) < 1e-12);
        double worst = 0.0;
        for (std::size_t i = 0; i < plain.second.size(); ++i) {
            worst = std::max(worst, std::abs(plain.second[i] - shared.second[i]));
        }
        CHECK(worst < 1e-12);
    }
    std::vector<std::size_t> single{2};
    CHECK(make_batch(enc, single, true).shared_prefix == 0);
}
