// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint, little-endian:
//   "FLEXCKPT" | u32 version | u64 n | n bytes of JSON header
//   | u64 count | count x (u32 len, name, u32 rank, u64 dims[rank], f32 values)
//   | "TNEND!\n\0"
// The header echoes the config text, so a checkpoint reloads on its own.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "flexfed/cli/config.hpp"
#include "flexfed/federation/federation.hpp"
#include "flexfed/model/params.hpp"

namespace flexfed::cli {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ExperimentConfig config;
    model::ModelParams base;
    /// Client training and evaluation data are not stored.
    fed::RunState state;
};

/// Values are written as f32; the write goes through a temporary file and a
/// rename, so an interrupted save leaves the previous file intact.
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const model::ModelParams& base, const fed::RunState& state);

/// Truncated or malformed -> CorruptionError; other version -> VersionError;
/// unreadable -> IoError. Nothing is returned on failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Human-readable summary: version, round, config echo and tensor table.
std::string describe_checkpoint(const std::filesystem::path& path);

/// Moves the saved optimizer and parameter state into a freshly initialized
/// run of the same config (which carries the client data).
void restore_state(fed::RunState& fresh, fed::RunState&& saved);

}  // namespace flexfed::cli
