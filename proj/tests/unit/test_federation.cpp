// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <omp.h>
#include <set>

#include "flexfed/error.hpp"
#include "flexfed/federation/federation.hpp"
#include "flexfed/numerics/rng.hpp"

using namespace flexfed;
using namespace flexfed::fed;

namespace {

bool bitwise_equal(const ParamMap& a, const ParamMap& b) {
    if (a.size() != b.size()) return false;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.size() != ib->second.size()) return false;
        if (std::memcmp(ia->second.data(), ib->second.data(), ia->second.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

ParamMap random_map(num::RngStream& rng, double scale = 1.0) {
    ParamMap m;
    m["x.lora_A"].resize(5);
    m["y.lora_B"].resize(3);
    for (auto& [_, v] : m) {
        for (auto& x : v) x = rng.normal(0.0, scale);
    }
    return m;
}

Update make_update(std::size_t id, std::size_t n, ParamMap values) {
    Update u;
    u.client_id = id;
    u.n = n;
    u.values = std::move(values);
    return u;
}

std::vector<Update> random_round(num::RngStream& rng, const ParamMap& global, std::size_t clients) {
    std::vector<Update> ups;
    for (std::size_t c = 0; c < clients; ++c) {
        auto v = global;
        for (auto& [_, xs] : v) {
            for (auto& x : xs) x += rng.normal(0.0, 0.1);
        }
        ups.push_back(make_update(c, 1 + rng.below(9), std::move(v)));
    }
    return ups;
}

model::ModelConfig toy_config() {
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_experts = 4;
    c.top_k = 2;
    return c;
}

RunConfig toy_run(Mode mode, std::size_t clients, std::size_t rounds) {
    RunConfig r;
    r.model = toy_config();
    r.mode = mode;
    r.clients = clients;
    r.per_round = clients;
    r.rounds = rounds;
    r.local.steps = 2;
    r.local.batch_size = 2;
    r.local.adam.lr = 1e-2;
    r.adapter.rank = 2;
    r.adapter.alpha = 4.0;
    r.calibration_sequences = 4;
    r.seed = 11;
    return r;
}

FederationData toy_data(std::size_t clients, std::size_t per_task = 6) {
    FederationData d;
    d.train = data::synth_tasks(static_cast<int>(clients), static_cast<int>(per_task), 2, "train");
    d.eval = data::synth_tasks(static_cast<int>(clients), 2, 2, "eval");
    d.partition = data::partition_pathological(d.train, clients);
    return d;
}

ClientState toy_client(const model::ModelConfig& c, Mode mode, std::uint64_t seed = 1) {
    ClientState client;
    auto corpus = data::synth_tasks(1, 6, seed, "client");
    for (const auto& e : corpus.examples) client.train.push_back(data::encode_example(e, c.max_seq_len));
    adapters::AdapterOptions opt;
    opt.rank = 2;
    opt.alpha = 4.0;
    client.adapters = adapters::attach_adapters(c, mode_targets(mode), opt, seed);
    return client;
}

double max_abs(const ParamMap& m) {
    double r = 0.0;
    for (const auto& [_, v] : m) {
        for (double x : v) r = std::max(r, std::abs(x));
    }
    return r;
}

}  // namespace

TEST_CASE("weighted mean reproduces the worked example", "[federation]") {
    ServerState s;
    s.global["w"] = {0.0};
    std::vector<Update> ups{make_update(0, 1, {{"w", {1.0}}}), make_update(1, 3, {{"w", {3.0}}})};
    aggregate(s, ups);
    CHECK(s.global["w"][0] == 2.5);
    CHECK(s.round == 1);

    // Order of the update list does not matter.
    ServerState t;
    t.global["w"] = {0.0};
    std::vector<Update> rev{ups[1], ups[0]};
    aggregate(t, rev);
    CHECK(t.global["w"][0] == 2.5);
}

TEST_CASE("single-client FedAvg adopts the local values", "[federation]") {
    num::RngStream rng(1, "test", "single");
    for (int trial = 0; trial < 10; ++trial) {
        ServerState s;
        s.global = random_map(rng);
        auto local = random_map(rng);
        std::vector<Update> ups{make_update(4, 17, local)};
        aggregate(s, ups);
        CHECK(bitwise_equal(s.global, local));
    }
}

TEST_CASE("client weights sum to one", "[federation][property]") {
    num::RngStream rng(2, "test", "weights");
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 1 + rng.below(10);
        std::size_t n = 0;
        std::vector<std::size_t> ns;
        for (std::size_t i = 0; i < k; ++i) ns.push_back(1 + rng.below(1000)), n += ns.back();
        double sum = 0.0;
        for (auto x : ns) sum += static_cast<double>(x) / static_cast<double>(n);
        CHECK(std::abs(sum - 1.0) <= 1e-15);
    }
}

TEST_CASE("strategy degeneracies hold bitwise", "[federation][property]") {
    num::RngStream rng(3, "test", "degenerate");
    const auto init = random_map(rng);

    ServerState avg, avgm, prox, scaffold;
    avg.global = avgm.global = prox.global = scaffold.global = init;
    avgm.options.strategy = Strategy::FedAvgM;
    avgm.options.momentum = 0.0;
    avgm.options.server_lr = 1.0;
    prox.options.strategy = Strategy::FedProx;
    scaffold.options.strategy = Strategy::Scaffold;
    scaffold.options.pin_controls = true;
    for (int round = 0; round < 10; ++round) {
        const auto ups = random_round(rng, avg.global, 3);
        aggregate(avg, ups);
        aggregate(avgm, ups);
        aggregate(prox, ups);
        aggregate(scaffold, ups);
        REQUIRE(bitwise_equal(avg.global, avgm.global));
        REQUIRE(bitwise_equal(avg.global, prox.global));
        REQUIRE(bitwise_equal(avg.global, scaffold.global));
    }
    CHECK(scaffold.control.empty());
}

TEST_CASE("FedYogi and FedAdam agree on the first round", "[federation]") {
    num::RngStream rng(4, "test", "yogi");
    const auto init = random_map(rng);
    ServerState adam, yogi;
    adam.global = yogi.global = init;
    adam.options.strategy = Strategy::FedAdam;
    yogi.options.strategy = Strategy::FedYogi;
    adam.options.server_lr = yogi.options.server_lr = 0.1;
    const auto ups = random_round(rng, init, 3);
    aggregate(adam, ups);
    aggregate(yogi, ups);
    CHECK(bitwise_equal(adam.global, yogi.global));
    CHECK(bitwise_equal(adam.v, yogi.v));

    // A second round with a different pseudo-gradient makes them diverge.
    const auto more = random_round(rng, adam.global, 3);
    aggregate(adam, more);
    aggregate(yogi, more);
    CHECK_FALSE(bitwise_equal(adam.global, yogi.global));
}

TEST_CASE("adaptive server rules follow their update formulas", "[federation]") {
    const double w0 = 0.5, local = 0.8, eta = 0.1, tau = 1e-3, b1 = 0.9, b2 = 0.99;
    const double delta = local - w0;
    for (auto strategy : {Strategy::FedAdam, Strategy::FedAdagrad, Strategy::FedYogi, Strategy::FedAvgM}) {
        ServerState s;
        s.global["w"] = {w0};
        s.options.strategy = strategy;
        s.options.server_lr = eta;
        s.options.momentum = 0.5;
        std::vector<Update> ups{make_update(0, 1, {{"w", {local}}})};
        aggregate(s, ups);
        aggregate(s, ups);  // second round: delta relative to the moved weight
        double w = w0, m = 0.0, v = 0.0;
        for (int r = 0; r < 2; ++r) {
            const double d = local - w;
            if (strategy == Strategy::FedAvgM) {
                m = 0.5 * m + d;
                w += eta * m;
                continue;
            }
            m = b1 * m + (1 - b1) * d;
            if (strategy == Strategy::FedAdam) v = b2 * v + (1 - b2) * d * d;
            if (strategy == Strategy::FedAdagrad) v = v + d * d;
            if (strategy == Strategy::FedYogi) v = v - (1 - b2) * d * d * (v - d * d > 0 ? 1.0 : -1.0);
            w += eta * m / (std::sqrt(v) + tau);
        }
        INFO(strategy_name(strategy));
        CHECK(s.global["w"][0] == Catch::Approx(w).epsilon(1e-12));
        CHECK(delta > 0.0);
    }
}

TEST_CASE("aggregation rejects malformed rounds", "[federation]") {
    ServerState s;
    s.global["w"] = {0.0};
    CHECK_THROWS_AS(aggregate(s, std::vector<Update>{}), ProtocolError);
    std::vector<Update> bad{make_update(0, 1, {{"v", {1.0}}})};
    CHECK_THROWS_AS(aggregate(s, bad), ProtocolError);
    std::vector<Update> mixed{make_update(0, 1, {{"w", {1.0}}}), make_update(1, 1, {{"w", {1.0, 2.0}}})};
    CHECK_THROWS_AS(aggregate(s, mixed), ProtocolError);
    std::vector<Update> empty{make_update(0, 0, {{"w", {1.0}}})};
    CHECK_THROWS_AS(aggregate(s, empty), ProtocolError);
    CHECK(s.round == 0);
}

TEST_CASE("SCAFFOLD moves the server control by the mean client correction", "[federation]") {
    ServerState s;
    s.global["w"] = {0.0, 0.0};
    s.options.strategy = Strategy::Scaffold;
    s.total_clients = 4;
    auto a = make_update(0, 1, {{"w", {1.0, 1.0}}});
    a.control_delta = ParamMap{{"w", {0.4, -0.4}}};
    auto b = make_update(1, 1, {{"w", {3.0, 3.0}}});
    b.control_delta = ParamMap{{"w", {0.8, 0.0}}};
    std::vector<Update> ups{a, b};
    aggregate(s, ups);
    CHECK(s.global["w"][0] == 2.0);
    CHECK(s.control["w"][0] == Catch::Approx(0.3));
    CHECK(s.control["w"][1] == Catch::Approx(-0.1));

    auto missing = make_update(0, 1, {{"w", {1.0, 1.0}}});
    std::vector<Update> bad{missing};
    CHECK_THROWS_AS(aggregate(s, bad), ProtocolError);
}

TEST_CASE("local training edge cases", "[federation]") {
    const auto c = toy_config();
    auto base = model::ModelParams::init(c, 5);
    LocalOptions opt;
    opt.batch_size = 2;
    opt.adam.lr = 1e-2;
    LocalContext ctx;
    ctx.seed = 3;
    ctx.round = 1;

    SECTION("zero steps upload a zero delta") {
        auto client = toy_client(c, Mode::DenseBaseline);
        const auto broadcast = shared_values(client.adapters);
        opt.steps = 0;
        auto u = local_train_round(client, base, &broadcast, opt, ctx);
        REQUIRE(u);
        CHECK(max_abs(u->delta) == 0.0);
        CHECK(u->n == client.n());
        CHECK(std::isnan(u->train_loss));
    }
    SECTION("empty partition is skipped") {
        auto client = toy_client(c, Mode::DenseBaseline);
        client.train.clear();
        CHECK_FALSE(local_train_round(client, base, nullptr, opt, ctx).has_value());
    }
    SECTION("FedProx with mu = 0 is plain local training") {
        auto a = toy_client(c, Mode::Flex);
        auto b = toy_client(c, Mode::Flex);
        a.personalized = b.personalized = model::PersonalizedState{};
        const auto broadcast = shared_values(a.adapters);
        opt.steps = 3;
        ServerOptions prox;
        prox.strategy = Strategy::FedProx;
        auto ctx_prox = ctx;
        ctx_prox.server = &prox;
        opt.mu = 0.0;
        auto ua = local_train_round(a, base, &broadcast, opt, ctx);
        auto ub = local_train_round(b, base, &broadcast, opt, ctx_prox);
        CHECK(bitwise_equal(ua->values, ub->values));
        CHECK(max_abs(ua->delta) > 0.0);
    }
    SECTION("a huge proximal weight pins the shared values") {
        auto free_client = toy_client(c, Mode::DenseBaseline);
        auto pinned = toy_client(c, Mode::DenseBaseline);
        const auto broadcast = shared_values(free_client.adapters);
        opt.steps = 5;
        auto loose = local_train_round(free_client, base, &broadcast, opt, ctx);
        opt.mu = 1e6;
        auto tight = local_train_round(pinned, base, &broadcast, opt, ctx);
        CHECK(max_abs(loose->delta) > 1e-3);
        CHECK(max_abs(tight->delta) < 1e-3);
    }
    SECTION("broadcast with the wrong keyset is refused") {
        auto client = toy_client(c, Mode::DenseBaseline);
        ParamMap wrong{{"nope", {1.0}}};
        CHECK_THROWS_AS(local_train_round(client, base, &wrong, opt, ctx), ProtocolError);
    }
}

TEST_CASE("FLEx uploads exactly the attention adapters", "[federation]") {
    const auto c = toy_config();
    auto client = toy_client(c, Mode::Flex);
    const auto broadcast = shared_values(client.adapters);
    const auto u = selective_payload(client, broadcast);
    std::set<std::string> targets;
    for (const auto& [k, _] : u.values) targets.insert(k.substr(0, k.rfind('.')));
    std::set<std::string> expected;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (auto p : model::kAttnProjections) expected.insert(model::attn_name(l, p));
    }
    CHECK(targets == expected);
    CHECK(targets.size() == 8);
    std::size_t count = 0;
    for (const auto& [_, v] : u.values) count += v.size();
    CHECK(count == client.adapters.count_params(adapters::ParamGroup::SharedAttention));
    CHECK(count == payload_params(c, Mode::Flex, adapters::AdapterOptions{2, 4.0, 0.01}));

    ParamMap leaked = u.values;
    leaked[model::side_name(0, "up") + ".lora_A"] = {0.0};
    CHECK_THROWS_AS(validate_payload(client.adapters, leaked), InvariantViolation);
    ParamMap gate = u.values;
    gate[model::side_router_name(1) + ".weight"] = {0.0};
    CHECK_THROWS_AS(validate_payload(client.adapters, gate), InvariantViolation);
}

TEST_CASE("dense payload dwarfs the FLEx payload at paper scale", "[federation]") {
    model::ModelConfig c;
    c.n_layers = 24;
    c.d_model = 2048;
    c.n_heads = 16;
    c.n_experts = 60;
    c.top_k = 4;
    c.expert_ratio = 0.25;
    adapters::AdapterOptions opt{32, 64.0, 0.01};
    const auto flex = payload_params(c, Mode::Flex, opt);
    CHECK(flex == 12582912);
    CHECK(payload_params(c, Mode::DenseBaseline, opt) / flex > 10);
    CHECK(payload_params(c, Mode::LocalOnly, opt) == 0);
}

TEST_CASE("run configuration is validated", "[federation]") {
    auto cfg = toy_run(Mode::Flex, 2, 1);
    cfg.per_round = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    auto base = model::ModelParams::init(cfg.model, 1);
    CHECK_THROWS_AS(run_federation(cfg, base, toy_data(2)), ConfigError);
    CHECK(parse_strategy("fedyogi") == Strategy::FedYogi);
    CHECK(parse_mode("dense-baseline") == Mode::DenseBaseline);
    CHECK_THROWS_AS(parse_mode("central"), ConfigError);
}

TEST_CASE("zero rounds leave clients at their post-pruning state", "[federation]") {
    auto cfg = toy_run(Mode::Flex, 2, 0);
    auto base = model::ModelParams::init(cfg.model, 1);
    const auto data = toy_data(2);
    auto r = run_federation(cfg, base, data);
    CHECK(r.state.metrics.empty());
    CHECK(r.state.ledger.empty());
    auto fresh = init_federation(cfg, base, data);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(adapters::serialize(r.state.clients[c].adapters) == adapters::serialize(fresh.clients[c].adapters));
        REQUIRE(r.state.clients[c].prune_report);
        CHECK(r.state.clients[c].personalized.layers.size() == 2);
    }
    CHECK(r.final_eval_loss == r.state.initial_eval_loss);
}

TEST_CASE("single-client FedAvg follows the local-only trajectory", "[federation]") {
    auto fedavg = toy_run(Mode::DenseBaseline, 1, 3);
    auto local = toy_run(Mode::LocalOnly, 1, 3);
    auto base = model::ModelParams::init(fedavg.model, 2);
    const auto data = toy_data(1);
    auto a = run_federation(fedavg, base, data);
    auto b = run_federation(local, base, data);
    CHECK(adapters::serialize(a.state.clients[0].adapters) == adapters::serialize(b.state.clients[0].adapters));
    REQUIRE(a.state.metrics.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.state.metrics[i].train_loss == b.state.metrics[i].train_loss);
        CHECK(a.state.metrics[i].eval_loss == b.state.metrics[i].eval_loss);
    }
    CHECK(b.state.ledger.empty());
    CHECK(b.state.metrics[0].uploaded == 0);
}

TEST_CASE("selective aggregation keeps shared values in sync and local values apart", "[federation]") {
    auto cfg = toy_run(Mode::Flex, 3, 3);
    auto base = model::ModelParams::init(cfg.model, 3);
    std::size_t rounds_seen = 0;
    auto hook = [&](const RunState& s) {
        ++rounds_seen;
        std::vector<ParamMap> shared;
        for (const auto& row : s.metrics) {
            if (row.round == s.rounds_done) shared.push_back(shared_values(s.clients[row.client_id].adapters));
        }
        for (const auto& m : shared) CHECK(bitwise_equal(m, s.server.global));
    };
    auto r = run_federation(cfg, base, toy_data(3), hook);
    CHECK(rounds_seen == 3);
    CHECK(r.state.server.round == 3);
    const auto& c0 = r.state.clients[0].adapters;
    const auto& c1 = r.state.clients[1].adapters;
    for (const auto& p : c0.parameters(adapters::ParamGroup::LocalExpert)) {
        const auto* other = c1.find(p.name.substr(0, p.name.rfind('.')));
        REQUIRE(other != nullptr);
    }
    CHECK(serialize(c0) != serialize(c1));
    for (const auto& row : r.state.ledger.rows()) CHECK(row.group == "shared_attention");
}

TEST_CASE("sampled rounds write one ledger row per direction and participant", "[federation]") {
    auto cfg = toy_run(Mode::Flex, 10, 2);
    cfg.per_round = 4;
    cfg.local.steps = 1;
    cfg.eval_every = 0;
    auto base = model::ModelParams::init(cfg.model, 4);
    FederationData data;
    data.train = data::synth_tasks(4, 20, 4, "train");
    data.eval = data::synth_tasks(4, 2, 4, "eval");
    data.partition = data::partition_dirichlet(data.train, 10, 1.0, 4);
    auto r = run_federation(cfg, base, data);
    CHECK(r.state.ledger.rows().size() == 2 * 2 * 4);
    CHECK(r.state.metrics.size() == 2 * 4);
    const auto s1 = sample_clients(cfg.seed, 1, 10, 4);
    CHECK(s1.size() == 4);
    CHECK(std::is_sorted(s1.begin(), s1.end()));
    CHECK(s1 == sample_clients(cfg.seed, 1, 10, 4));
}

TEST_CASE("parallel clients match sequential execution bitwise", "[federation]") {
    for (auto strategy : {Strategy::FedAvg, Strategy::Scaffold, Strategy::FedAdam}) {
        auto cfg = toy_run(Mode::Flex, 3, 2);
        cfg.server.strategy = strategy;
        cfg.server.server_lr = strategy == Strategy::FedAdam ? 1e-2 : 1.0;
        auto base = model::ModelParams::init(cfg.model, 5);
        const auto data = toy_data(3);
        cfg.parallel_clients = false;
        auto seq = run_federation(cfg, base, data);
        cfg.parallel_clients = true;
        const int saved = omp_get_max_threads();
        omp_set_num_threads(3);
        auto par = run_federation(cfg, base, data);
        omp_set_num_threads(saved);
        INFO(strategy_name(strategy));
        CHECK(metrics_csv(seq.state.metrics) == metrics_csv(par.state.metrics));
        CHECK(bitwise_equal(seq.state.server.global, par.state.server.global));
        CHECK(seq.final_eval_loss == par.final_eval_loss);
    }
}

TEST_CASE("metrics csv layout", "[federation]") {
    std::vector<MetricsRow> rows(2);
    rows[0] = {1, 0, 0.5, 0.25, 10, 10, 0.0};
    rows[1] = {1, 1, 0.75, std::nullopt, 10, 10, 0.0};
    CHECK(metrics_csv(rows) ==
          "round,client_id,train_loss,eval_loss,uploaded_params,downloaded_params,wall_ms\n"
          "1,0,0.5,0.25,10,10,0\n"
          "1,1,0.75,,10,10,0\n");
}
