// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/federation/federation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>

#include "flexfed/error.hpp"
#include "flexfed/eval/evaluate.hpp"
#include "flexfed/numerics/rng.hpp"
#include "flexfed/numerics/tape.hpp"

namespace flexfed::fed {

namespace {

constexpr std::pair<Strategy, std::string_view> kStrategies[] = {
    {Strategy::FedAvg, "fedavg"},         {Strategy::FedAvgM, "fedavgm"}, {Strategy::FedProx, "fedprox"},
    {Strategy::Scaffold, "scaffold"},     {Strategy::FedAdam, "fedadam"}, {Strategy::FedAdagrad, "fedadagrad"},
    {Strategy::FedYogi, "fedyogi"},
};

constexpr std::pair<Mode, std::string_view> kModes[] = {
    {Mode::Flex, "flex"},
    {Mode::DenseBaseline, "dense-baseline"},
    {Mode::LocalOnly, "local-only"},
};

std::string join_groups(const adapters::AdapterSet& set) {
    std::string tag;
    for (auto g : {adapters::ParamGroup::SharedAttention, adapters::ParamGroup::SharedExpert}) {
        if (set.count_params(g) == 0) continue;
        if (!tag.empty()) tag += '+';
        tag += adapters::group_name(g);
    }
    return tag;
}

std::size_t map_size(const ParamMap& m) {
    std::size_t n = 0;
    for (const auto& [_, v] : m) n += v.size();
    return n;
}

void check_same_keys(const ParamMap& a, const ParamMap& b, const char* what) {
    if (a.size() != b.size()) throw ProtocolError(std::string(what) + ": keyset size differs");
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first) throw ProtocolError(std::string(what) + ": unexpected key '" + ib->first + "'");
        if (ia->second.size() != ib->second.size()) {
            throw ProtocolError(std::string(what) + ": size mismatch for '" + ia->first + "'");
        }
    }
}

ParamMap zeros_like(const ParamMap& m) {
    ParamMap out;
    for (const auto& [k, v] : m) out[k].assign(v.size(), 0.0);
    return out;
}

/// Elementwise pairwise sum of terms[lo, hi).
std::vector<double> pairwise(const std::vector<const std::vector<double>*>& terms, std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return *terms[lo];
    const std::size_t mid = lo + (hi - lo) / 2;
    auto left = pairwise(terms, lo, mid);
    const auto right = pairwise(terms, mid, hi);
    for (std::size_t i = 0; i < left.size(); ++i) left[i] += right[i];
    return left;
}

double pairwise(std::span<const double> xs) {
    if (xs.size() == 1) return xs[0];
    const std::size_t mid = xs.size() / 2;
    return pairwise(xs.first(mid)) + pairwise(xs.subspan(mid));
}

std::vector<const Update*> sorted_by_id(std::span<const Update> updates) {
    std::vector<const Update*> out;
    for (const auto& u : updates) out.push_back(&u);
    std::sort(out.begin(), out.end(), [](const Update* a, const Update* b) { return a->client_id < b->client_id; });
    return out;
}

void round_f32(std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

void round_f32(std::span<double> v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

void round_f32(ParamMap& m) {
    for (auto& [_, v] : m) round_f32(v);
}

}  // namespace

Strategy parse_strategy(std::string_view name) {
    for (const auto& [s, n] : kStrategies) {
        if (n == name) return s;
    }
    throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::string_view strategy_name(Strategy strategy) {
    for (const auto& [s, n] : kStrategies) {
        if (s == strategy) return n;
    }
    return "unknown";
}

Mode parse_mode(std::string_view name) {
    for (const auto& [m, n] : kModes) {
        if (n == name) return m;
    }
    throw ConfigError("unknown mode '" + std::string(name) + "'");
}

std::string_view mode_name(Mode mode) {
    for (const auto& [m, n] : kModes) {
        if (m == mode) return n;
    }
    return "unknown";
}

adapters::AdapterTargets mode_targets(Mode mode) {
    adapters::AdapterTargets t;
    t.attention = true;
    t.side_expert = mode == Mode::Flex;
    t.all_experts = mode != Mode::Flex;
    return t;
}

std::size_t payload_params(const model::ModelConfig& config, Mode mode, const adapters::AdapterOptions& options) {
    if (mode == Mode::LocalOnly) return 0;
    const auto t = mode_targets(mode);
    return adapters::count_params(config, t, options, adapters::ParamGroup::SharedAttention) +
           adapters::count_params(config, t, options, adapters::ParamGroup::SharedExpert);
}

model::ForwardOptions ClientState::forward_options() const {
    model::ForwardOptions o;
    o.adapters = &adapters;
    o.personalized = personalized.initialized() ? &personalized : nullptr;
    return o;
}

ParamMap shared_values(const adapters::AdapterSet& set) {
    ParamMap out;
    for (const auto& p : set.shared_parameters()) {
        const auto d = p.tensor.data();
        out.emplace(p.name, std::vector<double>(d.begin(), d.end()));
    }
    return out;
}

void load_shared(const adapters::AdapterSet& set, const ParamMap& values) {
    const auto params = set.shared_parameters();
    if (params.size() != values.size()) {
        throw ProtocolError("broadcast holds " + std::to_string(values.size()) + " tensors, client shares " +
                            std::to_string(params.size()));
    }
    for (const auto& p : params) {
        auto it = values.find(p.name);
        if (it == values.end()) throw ProtocolError("broadcast is missing '" + p.name + "'");
        num::Tensor t = p.tensor;
        auto d = t.mutable_data();
        if (it->second.size() != d.size()) throw ProtocolError("broadcast size mismatch for '" + p.name + "'");
        std::copy(it->second.begin(), it->second.end(), d.begin());
    }
}

void validate_payload(const adapters::AdapterSet& set, const ParamMap& payload) {
    for (const auto& [name, _] : payload) {
        adapters::ParamGroup g{};
        try {
            g = set.group_of(name);
        } catch (const ConfigError&) {
            throw InvariantViolation("payload key '" + name + "' is not a client parameter");
        }
        if (!adapters::is_shared(g)) {
            throw InvariantViolation("payload contains " + std::string(adapters::group_name(g)) + " key '" + name +
                                     "'");
        }
    }
}

Update selective_payload(const ClientState& client, const ParamMap& broadcast) {
    Update u;
    u.client_id = client.id;
    u.n = client.n();
    u.values = shared_values(client.adapters);
    validate_payload(client.adapters, u.values);
    check_same_keys(broadcast, u.values, "payload");
    for (const auto& [k, v] : u.values) {
        const auto& b = broadcast.at(k);
        auto& d = u.delta[k];
        d.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) d[i] = v[i] - b[i];
    }
    return u;
}

std::optional<Update> local_train_round(ClientState& client, const model::ModelParams& base,
                                        const ParamMap* broadcast, const LocalOptions& options,
                                        const LocalContext& context) {
    if (client.train.empty()) return std::nullopt;
    const ServerOptions defaults;
    const ServerOptions& server = context.server ? *context.server : defaults;
    if (broadcast) load_shared(client.adapters, *broadcast);
    const ParamMap start = broadcast ? *broadcast : shared_values(client.adapters);

    const bool scaffold = server.strategy == Strategy::Scaffold && !server.pin_controls;
    if (scaffold) {
        if (!context.server_control) throw ProtocolError("SCAFFOLD round without a server control variate");
        if (client.control.empty()) client.control = zeros_like(start);
    }

    const auto named = client.adapters.parameters();
    std::vector<bool> shared(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) shared[i] = adapters::is_shared(client.adapters.group_of(named[i].name));

    num::RngStream rng =
        num::RngStream(context.seed, "federation", "batches").split("client" + std::to_string(client.id)).split(
            "round" + std::to_string(context.round));
    std::vector<std::size_t> order(client.train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));

    const auto fwd = client.forward_options();
    std::vector<double> losses;
    std::vector<std::size_t> pick(options.batch_size);
    for (std::size_t step = 0; step < options.steps; ++step) {
        for (std::size_t j = 0; j < pick.size(); ++j) pick[j] = order[(step * options.batch_size + j) % order.size()];
        for (auto p : named) p.tensor.zero_grad();
        {
            num::Tape tape;
            num::TapeScope scope(tape);
            auto loss = model::lm_loss(data::make_batch(client.train, pick, true), base, fwd);
            losses.push_back(loss.item());
            tape.backward(loss);
        }
        if (scaffold) {
            for (std::size_t i = 0; i < named.size(); ++i) {
                if (!shared[i]) continue;
                const auto& c = context.server_control->at(named[i].name);
                const auto& ci = client.control.at(named[i].name);
                num::Tensor t = named[i].tensor;
                auto g = t.mutable_grad();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += c[k] - ci[k];
            }
        }
        num::adam_step(named, client.adam, options.adam);
        if (options.mu != 0.0) {
            // Decoupled proximal step toward the broadcast.
            const double shrink = options.adam.lr * options.mu;
            for (std::size_t i = 0; i < named.size(); ++i) {
                if (!shared[i]) continue;
                const auto& w0 = start.at(named[i].name);
                num::Tensor t = named[i].tensor;
                auto w = t.mutable_data();
                for (std::size_t k = 0; k < w.size(); ++k) w[k] = (w[k] + shrink * w0[k]) / (1.0 + shrink);
            }
        }
    }

    Update u = selective_payload(client, start);
    u.train_loss = losses.empty() ? std::nan("") : pairwise(losses) / static_cast<double>(losses.size());
    if (scaffold && options.steps > 0) {
        // Option II: c_i+ = c_i - c + (x - y_i) / (steps * lr).
        const double inv = 1.0 / (static_cast<double>(options.steps) * options.adam.lr);
        ParamMap dc;
        for (auto& [k, ci] : client.control) {
            const auto& c = context.server_control->at(k);
            const auto& d = u.delta.at(k);
            auto& out = dc[k];
            out.resize(ci.size());
            for (std::size_t i = 0; i < ci.size(); ++i) {
                const double next = ci[i] - c[i] - d[i] * inv;
                out[i] = next - ci[i];
                ci[i] = next;
            }
        }
        u.control_delta = std::move(dc);
    }
    return u;
}

ParamMap weighted_mean(std::span<const Update> updates) {
    if (updates.empty()) throw ProtocolError("aggregation needs at least one update");
    const auto sorted = sorted_by_id(updates);
    std::size_t n = 0;
    for (const auto* u : sorted) {
        check_same_keys(sorted.front()->values, u->values, "aggregate");
        n += u->n;
    }
    if (n == 0) throw ProtocolError("aggregation over zero samples");
    std::vector<double> weights;
    for (const auto* u : sorted) weights.push_back(static_cast<double>(u->n) / static_cast<double>(n));
    if (std::abs(pairwise(weights) - 1.0) > 1e-12) throw InvariantViolation("client weights do not sum to 1");

    ParamMap mean;
    for (const auto& [key, first] : sorted.front()->values) {
        std::vector<std::vector<double>> terms(sorted.size());
        std::vector<const std::vector<double>*> ptrs;
        for (std::size_t c = 0; c < sorted.size(); ++c) {
            const auto& v = sorted[c]->values.at(key);
            terms[c].resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) terms[c][i] = weights[c] * v[i];
            ptrs.push_back(&terms[c]);
        }
        mean.emplace(key, pairwise(ptrs, 0, ptrs.size()));
    }
    return mean;
}

void aggregate(ServerState& server, std::span<const Update> updates) {
    const ParamMap mean = weighted_mean(updates);
    check_same_keys(server.global, mean, "aggregate");
    const auto& o = server.options;
    const bool adaptive =
        o.strategy == Strategy::FedAdam || o.strategy == Strategy::FedAdagrad || o.strategy == Strategy::FedYogi;
    if (server.m.empty() && (o.strategy == Strategy::FedAvgM || adaptive)) server.m = zeros_like(server.global);
    if (server.v.empty() && adaptive) server.v = zeros_like(server.global);

    for (auto& [key, w] : server.global) {
        const auto& avg = mean.at(key);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double delta = avg[i] - w[i];
            double step = 0.0;
            switch (o.strategy) {
                case Strategy::FedAvg:
                case Strategy::FedProx:
                case Strategy::Scaffold: step = o.server_lr * delta; break;
                case Strategy::FedAvgM: {
                    double& m = server.m[key][i];
                    m = o.momentum * m + delta;
                    step = o.server_lr * m;
                    break;
                }
                case Strategy::FedAdam:
                case Strategy::FedAdagrad:
                case Strategy::FedYogi: {
                    double& m = server.m[key][i];
                    double& v = server.v[key][i];
                    const double d2 = delta * delta;
                    m = o.beta1 * m + (1.0 - o.beta1) * delta;
                    if (o.strategy == Strategy::FedAdam) {
                        v = o.beta2 * v + (1.0 - o.beta2) * d2;
                    } else if (o.strategy == Strategy::FedAdagrad) {
                        v = v + d2;
                    } else {
                        const double diff = v - d2;
                        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                        v = v - (1.0 - o.beta2) * d2 * sign;
                    }
                    step = o.server_lr * m / (std::sqrt(v) + o.tau);
                    break;
                }
            }
            // w + step, anchored at the mean so a unit step reproduces it exactly.
            w[i] = avg[i] + (step - delta);
        }
    }

    if (o.strategy == Strategy::Scaffold && !o.pin_controls) {
        if (server.control.empty()) server.control = zeros_like(server.global);
        if (server.total_clients == 0) throw ProtocolError("SCAFFOLD server does not know the client count");
        const auto sorted = sorted_by_id(updates);
        const double inv_total = 1.0 / static_cast<double>(server.total_clients);
        for (auto& [key, c] : server.control) {
            std::vector<const std::vector<double>*> ptrs;
            for (const auto* u : sorted) {
                if (!u->control_delta) throw ProtocolError("SCAFFOLD update without a control delta");
                ptrs.push_back(&u->control_delta->at(key));
            }
            const auto sum = pairwise(ptrs, 0, ptrs.size());
            for (std::size_t i = 0; i < c.size(); ++i) c[i] += inv_total * sum[i];
        }
    }
    ++server.round;
}

void RunConfig::validate() const {
    model.validate();
    if (clients == 0) throw ConfigError("federation.clients must be positive");
    if (per_round == 0) throw ConfigError("federation.clients_per_round must be positive");
    if (per_round > clients) {
        throw ConfigError("federation.clients_per_round (" + std::to_string(per_round) +
                          ") exceeds federation.clients (" + std::to_string(clients) + ")");
    }
    if (local.batch_size == 0) throw ConfigError("federation.batch_size must be positive");
    if (!(local.adam.lr > 0.0)) throw ConfigError("federation.lr must be positive");
    if (local.mu < 0.0) throw ConfigError("federation.mu must be nonnegative");
    if (!(server.server_lr > 0.0)) throw ConfigError("federation.server_lr must be positive");
    if (server.tau <= 0.0) throw ConfigError("federation.tau must be positive");
    if (adapter.rank == 0) throw ConfigError("adapters.rank must be positive");
    if (mode == Mode::Flex && calibration_sequences == 0) {
        throw ConfigError("pruning.calibration_sequences must be positive");
    }
}

std::string metrics_csv(std::span<const MetricsRow> rows) {
    std::ostringstream out;
    out << "round,client_id,train_loss,eval_loss,uploaded_params,downloaded_params,wall_ms\n";
    char buf[40];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        out << r.round << ',' << r.client_id << ',' << num(r.train_loss) << ','
            << (r.eval_loss ? num(*r.eval_loss) : std::string()) << ',' << r.uploaded << ',' << r.downloaded << ','
            << num(r.wall_ms) << '\n';
    }
    return out.str();
}

std::vector<std::size_t> sample_clients(std::uint64_t seed, std::size_t round, std::size_t total,
                                        std::size_t per_round) {
    std::vector<std::size_t> ids(total);
    std::iota(ids.begin(), ids.end(), 0);
    if (per_round < total) {
        auto rng = num::RngStream(seed, "federation", "sampling").split("round" + std::to_string(round));
        rng.shuffle(std::span<std::size_t>(ids));
        ids.resize(per_round);
        std::sort(ids.begin(), ids.end());
    }
    return ids;
}

RunState init_federation(const RunConfig& config, const model::ModelParams& base, const FederationData& data) {
    config.validate();
    if (data.partition.size() != config.clients) {
        throw ConfigError("partition has " + std::to_string(data.partition.size()) + " clients, config has " +
                          std::to_string(config.clients));
    }
    const auto targets = mode_targets(config.mode);
    const auto eval_tasks = data::assign_eval_tasks(data.train, data.partition);

    RunState state;
    state.server.options = config.server;
    state.server.total_clients = config.clients;
    const auto global_init = adapters::attach_adapters(config.model, targets, config.adapter, config.seed);
    state.server.global = shared_values(global_init);

    const std::size_t max_len = config.model.max_seq_len;
    for (std::size_t c = 0; c < config.clients; ++c) {
        ClientState client;
        client.id = c;
        for (auto i : data.partition[c]) client.train.push_back(data::encode_example(data.train.examples.at(i), max_len));
        if (client.train.empty()) throw ConfigError("client " + std::to_string(c) + " has no training data");
        const auto& tasks = eval_tasks[c];
        for (const auto& e : data.eval.examples) {
            if (std::find(tasks.begin(), tasks.end(), e.task_label) != tasks.end()) {
                client.eval.push_back(data::encode_example(e, max_len));
            }
        }
        if (client.eval.empty()) throw ConfigError("client " + std::to_string(c) + " has no evaluation data");

        const std::uint64_t client_seed = num::mix64(config.seed ^ num::hash_name("client" + std::to_string(c)));
        client.adapters = adapters::attach_adapters(config.model, targets, config.adapter, client_seed);
        load_shared(client.adapters, state.server.global);
        state.clients.push_back(std::move(client));
    }

    const auto prepare = [&](ClientState& client) {
        if (config.mode == Mode::Flex) {
            const auto seqs = pruning::calibration_sequences(data.train, data.partition[client.id], max_len,
                                                             config.calibration_sequences);
            const auto calib = pruning::record_moe_inputs(base, seqs);
            client.prune_report = pruning::select_personalized_experts(base, calib);
            client.personalized = pruning::build_personalized_state(base, *client.prune_report);
        }
    };
    for (auto& client : state.clients) prepare(client);
    state.initial_eval_loss = evaluate_all(state, config, base);
    return state;
}

namespace {

double client_eval_loss(const ClientState& client, const model::ModelParams& base) {
    return eval::eval_loss(base, client.forward_options(), client.eval);
}

template <class Fn>
void for_each_client(const std::vector<std::size_t>& ids, bool parallel, Fn fn) {
    std::vector<std::exception_ptr> errors(ids.size());
    const auto n = static_cast<long>(ids.size());
#pragma omp parallel for schedule(static, 1) if (parallel)
    for (long i = 0; i < n; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

std::vector<double> evaluate_all(RunState& state, const RunConfig& config, const model::ModelParams& base) {
    std::vector<std::size_t> ids(state.clients.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::vector<double> losses(ids.size());
    for_each_client(ids, config.parallel_clients, [&](std::size_t i) {
        auto& client = state.clients[i];
        if (config.mode != Mode::LocalOnly) load_shared(client.adapters, state.server.global);
        losses[i] = client_eval_loss(client, base);
    });
    return losses;
}

void run_rounds(RunState& state, const RunConfig& config, const model::ModelParams& base, const RoundHook& hook) {
    config.validate();
    const bool communicate = config.mode != Mode::LocalOnly;
    while (state.rounds_done < config.rounds) {
        const std::size_t round = state.rounds_done + 1;
        const auto ids = sample_clients(config.seed, round, config.clients, config.per_round);
        const ParamMap broadcast = state.server.global;
        const std::size_t wire = communicate ? map_size(broadcast) : 0;

        LocalContext ctx;
        ctx.seed = config.seed;
        ctx.round = round;
        ctx.server = &state.server.options;
        if (config.server.strategy == Strategy::Scaffold && !config.server.pin_controls) {
            if (state.server.control.empty()) state.server.control = zeros_like(state.server.global);
            ctx.server_control = &state.server.control;
        }

        std::vector<std::optional<Update>> results(ids.size());
        for_each_client(ids, config.parallel_clients, [&](std::size_t i) {
            results[i] = local_train_round(state.clients[ids[i]], base, communicate ? &broadcast : nullptr,
                                           config.local, ctx);
        });

        std::vector<Update> updates;
        for (auto& r : results) {
            if (r) updates.push_back(std::move(*r));
        }
        if (communicate) {
            for (const auto& u : updates) {
                const std::string tag = join_groups(state.clients[u.client_id].adapters);
                state.ledger.record(round, eval::Direction::Down, u.client_id, tag, wire);
                state.ledger.record(round, eval::Direction::Up, u.client_id, tag, map_size(u.values));
            }
            aggregate(state.server, updates);
        } else {
            ++state.server.round;
        }

        const bool evaluate = round == config.rounds || (config.eval_every != 0 && round % config.eval_every == 0);
        std::vector<std::optional<double>> evals(updates.size());
        if (evaluate) {
            std::vector<std::size_t> idx(updates.size());
            std::iota(idx.begin(), idx.end(), 0);
            for_each_client(idx, config.parallel_clients, [&](std::size_t i) {
                auto& client = state.clients[updates[i].client_id];
                if (communicate) load_shared(client.adapters, state.server.global);
                evals[i] = client_eval_loss(client, base);
            });
        }
        for (std::size_t i = 0; i < updates.size(); ++i) {
            MetricsRow row;
            row.round = round;
            row.client_id = updates[i].client_id;
            row.train_loss = updates[i].train_loss;
            row.eval_loss = evals[i];
            row.uploaded = communicate ? map_size(updates[i].values) : 0;
            row.downloaded = wire;
            state.metrics.push_back(row);
        }
        state.rounds_done = round;
        if (config.checkpoint_every != 0 && round % config.checkpoint_every == 0) quantize_state(state);
        if (hook) hook(state);
    }
}

double RunResult::mean_final_eval_loss() const {
    return final_eval_loss.empty() ? 0.0 : pairwise(final_eval_loss) / static_cast<double>(final_eval_loss.size());
}

double RunResult::mean_initial_eval_loss() const {
    const auto& v = state.initial_eval_loss;
    return v.empty() ? 0.0 : pairwise(v) / static_cast<double>(v.size());
}

RunResult run_federation(const RunConfig& config, const model::ModelParams& base, const FederationData& data,
                         const RoundHook& hook) {
    RunResult result;
    result.state = init_federation(config, base, data);
    run_rounds(result.state, config, base, hook);
    result.final_eval_loss = evaluate_all(result.state, config, base);
    return result;
}

void quantize_state(RunState& state) {
    round_f32(state.server.global);
    round_f32(state.server.m);
    round_f32(state.server.v);
    round_f32(state.server.control);
    for (auto& client : state.clients) {
        for (auto p : client.adapters.parameters()) round_f32(p.tensor.mutable_data());
        for (auto& [_, slot] : client.adam.slots) {
            round_f32(slot.m);
            round_f32(slot.v);
        }
        round_f32(client.control);
    }
}

}  // namespace flexfed::fed
