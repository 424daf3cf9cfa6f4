// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "flexfed/data/corpus.hpp"

namespace flexfed::data {

enum class PartitionMode { Pathological, Dirichlet, Iid };

PartitionMode parse_partition_mode(std::string_view name);
std::string_view partition_mode_name(PartitionMode mode);

struct PartitionSpec {
    PartitionMode mode = PartitionMode::Pathological;
    double alpha = 1.0;
    std::size_t clients = 4;
    std::uint64_t seed = 0;
};

/// Example indices of every client, ascending within a client.
using Partition = std::vector<std::vector<std::size_t>>;

/// Client i takes labels i, i+K, i+2K, ... (labels in ascending order).
/// Fewer labels than clients -> ConfigError.
Partition partition_pathological(const Corpus& corpus, std::size_t clients);

/// Per label, p ~ Dir(alpha * 1_K) via Gamma draws; the label's examples
/// (shuffled) are split at the cumulative proportions. Empty clients take
/// one example from the largest client.
Partition partition_dirichlet(const Corpus& corpus, std::size_t clients, double alpha, std::uint64_t seed);

/// Shuffled round-robin split.
Partition partition_iid(const Corpus& corpus, std::size_t clients, std::uint64_t seed);

Partition make_partition(const Corpus& corpus, const PartitionSpec& spec);

/// Throws InvariantViolation unless the partition is a disjoint cover of [0, n).
void check_disjoint_cover(const Partition& partition, std::size_t n);

/// Label histogram of one client.
std::vector<std::size_t> label_counts(const Corpus& corpus, const std::vector<std::size_t>& indices);

/// Evaluation tasks of every client: each label goes to the client holding
/// the most training examples of it (ties to the lower id); a client left
/// without a label takes its own majority label.
std::vector<std::vector<int>> assign_eval_tasks(const Corpus& corpus, const Partition& partition);

/// {"mode", "alpha", "seed", "clients": [[indices]...]} as JSON text.
std::string partition_manifest_json(const PartitionSpec& spec, const Partition& partition);

}  // namespace flexfed::data
