// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// In-process federated simulation. Clients train adapter sets on top of a
// frozen base model; only parameters in a shared group cross the
// client/server boundary. Every server strategy is driven by the weighted
// mean of the uploaded values.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flexfed/adapters/adapters.hpp"
#include "flexfed/data/corpus.hpp"
#include "flexfed/data/partition.hpp"
#include "flexfed/eval/ledger.hpp"
#include "flexfed/model/forward.hpp"
#include "flexfed/model/params.hpp"
#include "flexfed/numerics/adam.hpp"
#include "flexfed/pruning/pruning.hpp"

namespace flexfed::fed {

enum class Strategy { FedAvg, FedAvgM, FedProx, Scaffold, FedAdam, FedAdagrad, FedYogi };
enum class Mode { Flex, DenseBaseline, LocalOnly };

Strategy parse_strategy(std::string_view name);
std::string_view strategy_name(Strategy strategy);
Mode parse_mode(std::string_view name);
std::string_view mode_name(Mode mode);

/// Adapter families trained in each mode. Local-only trains the dense
/// baseline's families without communicating.
adapters::AdapterTargets mode_targets(Mode mode);

/// Parameters one client uploads per round in `mode` (0 for local-only).
std::size_t payload_params(const model::ModelConfig& config, Mode mode, const adapters::AdapterOptions& options);

/// Flat values by parameter name.
using ParamMap = std::map<std::string, std::vector<double>>;

struct ServerOptions {
    Strategy strategy = Strategy::FedAvg;
    double server_lr = 1.0;
    /// FedAvgM momentum.
    double momentum = 0.9;
    /// First/second moment decay of FedAdam, FedAdagrad (beta1 only) and FedYogi.
    double beta1 = 0.9;
    double beta2 = 0.99;
    double tau = 1e-3;
    /// SCAFFOLD with every control variate held at zero.
    bool pin_controls = false;
};

struct LocalOptions {
    std::size_t steps = 10;
    std::size_t batch_size = 4;
    num::AdamHyper adam;
    /// FedProx proximal weight; 0 disables the term.
    double mu = 0.0;
};

struct ClientState {
    std::size_t id = 0;
    std::vector<data::EncodedExample> train;
    std::vector<data::EncodedExample> eval;
    adapters::AdapterSet adapters;
    model::PersonalizedState personalized;
    std::optional<pruning::PruneReport> prune_report;
    num::AdamState adam;
    /// SCAFFOLD client control variate over the shared keyset.
    ParamMap control;

    [[nodiscard]] std::size_t n() const { return train.size(); }
    [[nodiscard]] model::ForwardOptions forward_options() const;
};

struct ServerState {
    ServerOptions options;
    ParamMap global;
    /// Momentum / first moment and second moment buffers.
    ParamMap m;
    ParamMap v;
    /// SCAFFOLD server control variate.
    ParamMap control;
    std::uint64_t round = 0;
    std::size_t total_clients = 0;
};

/// Upload of one client. Carries the trained values; delta is
/// values - broadcast.
struct Update {
    std::size_t client_id = 0;
    ParamMap values;
    ParamMap delta;
    std::size_t n = 0;
    std::optional<ParamMap> control_delta;
    /// Mean LM loss over the local steps (NaN when no step ran).
    double train_loss = 0.0;
};

/// Values of every shared-group parameter of the set.
ParamMap shared_values(const adapters::AdapterSet& set);
/// Writes `values` into the shared parameters. Keyset or size mismatch ->
/// ProtocolError.
void load_shared(const adapters::AdapterSet& set, const ParamMap& values);

/// Throws InvariantViolation if a payload key belongs to a LOCAL group or is
/// unknown to the set.
void validate_payload(const adapters::AdapterSet& set, const ParamMap& payload);

/// Shared values of the client as an upload; validated.
Update selective_payload(const ClientState& client, const ParamMap& broadcast);

struct LocalContext {
    std::uint64_t seed = 0;
    std::size_t round = 0;
    const ServerOptions* server = nullptr;
    /// SCAFFOLD server control; null unless the strategy is SCAFFOLD.
    const ParamMap* server_control = nullptr;
};

/// Loads the broadcast (if any), runs `steps` Adam steps on batches drawn
/// from the (seed, client, round) stream and returns the upload. An empty
/// partition returns nullopt (client skipped).
std::optional<Update> local_train_round(ClientState& client, const model::ModelParams& base,
                                        const ParamMap* broadcast, const LocalOptions& options,
                                        const LocalContext& context);

/// Weighted mean sum(n_i/n * values_i), clients in ascending id, pairwise
/// summation per element.
ParamMap weighted_mean(std::span<const Update> updates);

/// One server step. Empty list or keyset mismatch -> ProtocolError.
void aggregate(ServerState& server, std::span<const Update> updates);

struct RunConfig {
    model::ModelConfig model;
    Mode mode = Mode::Flex;
    ServerOptions server;
    LocalOptions local;
    adapters::AdapterOptions adapter;
    std::size_t clients = 4;
    std::size_t per_round = 4;
    std::size_t rounds = 10;
    std::size_t calibration_sequences = pruning::kDefaultCalibrationSequences;
    /// Participants are evaluated after rounds divisible by this and after
    /// the last round; 0 evaluates only after the last round.
    std::size_t eval_every = 1;
    /// State is rounded to f32 after rounds divisible by this, so a run
    /// resumed from a checkpoint of that round continues bitwise. 0 never.
    std::size_t checkpoint_every = 0;
    bool parallel_clients = true;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
};

struct FederationData {
    data::Corpus train;
    data::Corpus eval;
    data::Partition partition;
};

struct MetricsRow {
    std::size_t round = 0;
    std::size_t client_id = 0;
    double train_loss = 0.0;
    std::optional<double> eval_loss;
    std::size_t uploaded = 0;
    std::size_t downloaded = 0;
    /// Always 0 so metrics stay reproducible.
    double wall_ms = 0.0;
};

/// "round,client_id,train_loss,eval_loss,uploaded_params,downloaded_params,wall_ms"
std::string metrics_csv(std::span<const MetricsRow> rows);

struct RunState {
    ServerState server;
    std::vector<ClientState> clients;
    std::size_t rounds_done = 0;
    std::vector<MetricsRow> metrics;
    eval::CommLedger ledger;
    /// Eval loss of every client before round 1.
    std::vector<double> initial_eval_loss;
};

/// Builds clients from the partition, prunes once per client (FLEx) and
/// records the initial eval losses. M > K or an empty client -> ConfigError.
RunState init_federation(const RunConfig& config, const model::ModelParams& base, const FederationData& data);

using RoundHook = std::function<void(const RunState&)>;

/// Runs rounds rounds_done+1 .. config.rounds, calling `hook` after each.
void run_rounds(RunState& state, const RunConfig& config, const model::ModelParams& base,
                const RoundHook& hook = {});

/// Eval loss of every client with the current global shared values loaded
/// (own values for local-only).
std::vector<double> evaluate_all(RunState& state, const RunConfig& config, const model::ModelParams& base);

struct RunResult {
    RunState state;
    std::vector<double> final_eval_loss;

    [[nodiscard]] double mean_final_eval_loss() const;
    [[nodiscard]] double mean_initial_eval_loss() const;
};

RunResult run_federation(const RunConfig& config, const model::ModelParams& base, const FederationData& data,
                         const RoundHook& hook = {});

/// Rounds every trainable value, optimizer moment and server buffer to f32.
void quantize_state(RunState& state);

/// Clients sampled in `round`, ascending.
std::vector<std::size_t> sample_clients(std::uint64_t seed, std::size_t round, std::size_t total, std::size_t per_round);

}  // namespace flexfed::fed
