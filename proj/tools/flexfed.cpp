// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "flexfed/cli/commands.hpp"
#include "flexfed/error.hpp"

namespace cli = flexfed::cli;

int main(int argc, char** argv) {
    CLI::App app{"flexfed: federated MoE adapter tuning experiments"};
    app.require_subcommand(1);

    std::string config, out, mode, resume, checkpoint;
    std::optional<std::uint64_t> seed;

    auto add_overrides = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Override run.seed");
        sub->add_option("--mode", mode, "Override federation.mode")
            ->check(CLI::IsMember({"flex", "dense-baseline", "local-only"}));
    };

    auto* run = app.add_subcommand("run", "Run a federated experiment");
    run->add_option("--config", config, "Experiment config (INI)")->required();
    run->add_option("--out", out, "Output directory")->required();
    run->add_option("--resume", resume, "Checkpoint to resume from");
    add_overrides(run);

    auto* prune = app.add_subcommand("prune", "Select personalized experts and write the loss table");
    prune->add_option("--config", config, "Experiment config (INI)")->required();
    prune->add_option("--out", out, "Output JSON file")->required();
    add_overrides(prune);

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--config", config, "Config supplying the evaluation data (default: the checkpoint's)");
    eval->add_option("--out", out, "Output JSON file")->required();

    auto* inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint summary");
    inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);
    cli::init_logging();

    cli::Overrides overrides;
    overrides.seed = seed;
    if (!mode.empty()) overrides.mode = flexfed::fed::parse_mode(mode);

    if (*run) {
        std::optional<std::filesystem::path> from;
        if (!resume.empty()) from = resume;
        return cli::cmd_run(config, out, overrides, from);
    }
    if (*prune) return cli::cmd_prune(config, out, overrides);
    if (*eval) {
        std::optional<std::filesystem::path> cfg;
        if (!config.empty()) cfg = config;
        return cli::cmd_eval(checkpoint, out, cfg);
    }
    return cli::cmd_inspect(checkpoint);
}
