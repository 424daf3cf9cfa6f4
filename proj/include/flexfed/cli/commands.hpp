// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subcommand entry points. Each returns a process exit code and reports
// errors on stderr; none of them throws.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "flexfed/cli/config.hpp"

namespace flexfed::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
/// Invalid configuration or missing input.
inline constexpr int kExitConfig = 2;
/// Non-finite loss during training; the last good checkpoint is kept.
inline constexpr int kExitNumeric = 3;
/// Unreadable, corrupt or incompatible checkpoint.
inline constexpr int kExitCheckpoint = 4;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<fed::Mode> mode;
};

void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

/// Reads FLEXFED_LOG_LEVEL (trace, debug, info, warn, error, off; default warn).
void init_logging();

/// Writes metrics.csv, ledger.csv, report.json, manifest.json and
/// checkpoints/round_####.ckpt under `out_dir`. Checkpoints are written after
/// round 0, every run.checkpoint_every rounds, and after the final round.
int cmd_run(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
            const Overrides& overrides = {}, const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Calibration and expert selection only; writes the per-client, per-layer
/// loss table to `out` as JSON.
int cmd_prune(const std::filesystem::path& config_path, const std::filesystem::path& out,
              const Overrides& overrides = {});

/// Per-client eval loss and ROUGE-L of a checkpoint, as JSON. The data comes
/// from `config_path` when given, otherwise from the checkpoint's config echo.
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& out,
             const std::optional<std::filesystem::path>& config_path = std::nullopt);

/// Prints the checkpoint summary to stdout.
int cmd_inspect(const std::filesystem::path& checkpoint);

}  // namespace flexfed::cli
