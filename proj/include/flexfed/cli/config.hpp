// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: an INI file with one section per module.
// Unknown sections and keys are errors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "flexfed/data/partition.hpp"
#include "flexfed/federation/federation.hpp"

namespace flexfed::cli {

enum class DataSource { Synth, Jsonl };

struct DataConfig {
    DataSource source = DataSource::Synth;
    std::filesystem::path train_path;
    /// Optional for jsonl; the training file is reused when empty.
    std::filesystem::path eval_path;
    int synth_tasks = 4;
    int synth_train_per_task = 200;
    int synth_eval_per_task = 16;
    data::PartitionMode partition = data::PartitionMode::Pathological;
    double alpha = 1.0;
};

struct EvalConfig {
    std::size_t every_n_rounds = 1;
    std::size_t max_new_tokens = 32;
    double rouge_beta = 1.0;
};

struct ExperimentConfig {
    fed::RunConfig run;
    DataConfig data;
    EvalConfig eval;
    /// Source text, echoed into checkpoints and manifests.
    std::string text;
    /// Directory relative data paths were resolved against.
    std::filesystem::path base_dir;

    /// Cross-field checks of every section; ConfigError names the field.
    void validate() const;
};

/// Parses INI text. Paths are resolved against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
/// Unreadable file -> IoError.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Training and evaluation corpora plus the partition the config describes.
/// A missing data file -> ConfigError naming data.train_path / data.eval_path.
fed::FederationData load_data(const ExperimentConfig& config);

/// Git-style blob SHA-1 ("blob <len>\0" + content), lowercase hex.
std::string content_hash(const std::string& content);

}  // namespace flexfed::cli
