// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/data/partition.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "flexfed/error.hpp"
#include "flexfed/numerics/rng.hpp"

namespace flexfed::data {

PartitionMode parse_partition_mode(std::string_view name) {
    if (name == "pathological") return PartitionMode::Pathological;
    if (name == "dirichlet") return PartitionMode::Dirichlet;
    if (name == "iid") return PartitionMode::Iid;
    throw ConfigError("unknown partition mode '" + std::string(name) + "'");
}

std::string_view partition_mode_name(PartitionMode mode) {
    switch (mode) {
        case PartitionMode::Pathological: return "pathological";
        case PartitionMode::Dirichlet: return "dirichlet";
        case PartitionMode::Iid: return "iid";
    }
    return "unknown";
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_label(const Corpus& corpus) {
    int max_label = -1;
    for (const auto& e : corpus.examples) max_label = std::max(max_label, e.task_label);
    const std::size_t n_labels = std::max(corpus.n_labels(), static_cast<std::size_t>(max_label + 1));
    std::vector<std::vector<std::size_t>> by(n_labels);
    for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
        by[static_cast<std::size_t>(corpus.examples[i].task_label)].push_back(i);
    }
    return by;
}

void sort_clients(Partition& p) {
    for (auto& c : p) std::sort(c.begin(), c.end());
}

}  // namespace

Partition partition_pathological(const Corpus& corpus, std::size_t clients) {
    if (clients < 1) throw ConfigError("partition: clients must be >= 1");
    auto by = indices_by_label(corpus);
    std::vector<std::size_t> present;
    for (std::size_t l = 0; l < by.size(); ++l) {
        if (!by[l].empty()) present.push_back(l);
    }
    if (present.size() < clients) {
        throw ConfigError("pathological partition needs at least " + std::to_string(clients) + " labels, corpus has " +
                          std::to_string(present.size()));
    }
    Partition p(clients);
    for (std::size_t i = 0; i < present.size(); ++i) {
        auto& dst = p[i % clients];
        dst.insert(dst.end(), by[present[i]].begin(), by[present[i]].end());
    }
    sort_clients(p);
    return p;
}

Partition partition_dirichlet(const Corpus& corpus, std::size_t clients, double alpha, std::uint64_t seed) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("dirichlet alpha must be positive");
    if (clients < 1) throw ConfigError("partition: clients must be >= 1");
    if (corpus.size() < clients) {
        throw ConfigError("corpus of " + std::to_string(corpus.size()) + " examples is smaller than " +
                          std::to_string(clients) + " clients");
    }
    auto by = indices_by_label(corpus);
    Partition p(clients);
    for (std::size_t label = 0; label < by.size(); ++label) {
        auto& items = by[label];
        if (items.empty()) continue;
        num::RngStream rng(seed, "data", "dirichlet/label" + std::to_string(label));
        rng.shuffle(std::span<std::size_t>(items));
        std::vector<double> w(clients);
        double total = 0.0;
        for (auto& x : w) total += (x = rng.gamma(alpha));
        if (!(total > 0.0)) {
            // Every draw underflowed; all mass goes to one client.
            std::fill(w.begin(), w.end(), 0.0);
            w[rng.below(clients)] = 1.0;
            total = 1.0;
        }
        const double n = static_cast<double>(items.size());
        double cum = 0.0;
        std::size_t start = 0;
        for (std::size_t c = 0; c < clients; ++c) {
            cum += w[c];
            const std::size_t end =
                c + 1 == clients ? items.size() : std::min(items.size(), static_cast<std::size_t>(std::llround(cum / total * n)));
            for (std::size_t i = start; i < std::max(start, end); ++i) p[c].push_back(items[i]);
            start = std::max(start, end);
        }
    }
    for (std::size_t c = 0; c < clients; ++c) {
        while (p[c].empty()) {
            std::size_t largest = 0;
            for (std::size_t j = 1; j < clients; ++j) {
                if (p[j].size() > p[largest].size()) largest = j;
            }
            p[c].push_back(p[largest].back());
            p[largest].pop_back();
        }
    }
    sort_clients(p);
    return p;
}

Partition partition_iid(const Corpus& corpus, std::size_t clients, std::uint64_t seed) {
    if (clients < 1) throw ConfigError("partition: clients must be >= 1");
    if (corpus.size() < clients) throw ConfigError("corpus is smaller than the number of clients");
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    num::RngStream rng(seed, "data", "iid");
    rng.shuffle(std::span<std::size_t>(order));
    Partition p(clients);
    for (std::size_t i = 0; i < order.size(); ++i) p[i % clients].push_back(order[i]);
    sort_clients(p);
    return p;
}

Partition make_partition(const Corpus& corpus, const PartitionSpec& spec) {
    switch (spec.mode) {
        case PartitionMode::Pathological: return partition_pathological(corpus, spec.clients);
        case PartitionMode::Dirichlet: return partition_dirichlet(corpus, spec.clients, spec.alpha, spec.seed);
        case PartitionMode::Iid: return partition_iid(corpus, spec.clients, spec.seed);
    }
    throw ConfigError("unknown partition mode");
}

void check_disjoint_cover(const Partition& partition, std::size_t n) {
    std::vector<int> seen(n, 0);
    for (const auto& c : partition) {
        for (auto i : c) {
            if (i >= n) throw InvariantViolation("partition index " + std::to_string(i) + " out of range");
            if (seen[i]++) throw InvariantViolation("example " + std::to_string(i) + " assigned twice");
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!seen[i]) throw InvariantViolation("example " + std::to_string(i) + " not assigned");
    }
}

std::vector<std::size_t> label_counts(const Corpus& corpus, const std::vector<std::size_t>& indices) {
    std::vector<std::size_t> counts(corpus.n_labels(), 0);
    for (auto i : indices) {
        const auto l = static_cast<std::size_t>(corpus.examples.at(i).task_label);
        if (l >= counts.size()) counts.resize(l + 1, 0);
        ++counts[l];
    }
    return counts;
}

std::vector<std::vector<int>> assign_eval_tasks(const Corpus& corpus, const Partition& partition) {
    std::vector<std::vector<std::size_t>> counts;
    std::size_t n_labels = corpus.n_labels();
    for (const auto& c : partition) {
        counts.push_back(label_counts(corpus, c));
        n_labels = std::max(n_labels, counts.back().size());
    }
    for (auto& c : counts) c.resize(n_labels, 0);
    std::vector<std::vector<int>> tasks(partition.size());
    for (std::size_t l = 0; l < n_labels; ++l) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < partition.size(); ++c) {
            if (counts[c][l] > counts[best][l]) best = c;
        }
        if (counts[best][l] > 0) tasks[best].push_back(static_cast<int>(l));
    }
    for (std::size_t c = 0; c < partition.size(); ++c) {
        if (!tasks[c].empty()) continue;
        std::size_t majority = 0;
        for (std::size_t l = 1; l < n_labels; ++l) {
            if (counts[c][l] > counts[c][majority]) majority = l;
        }
        tasks[c].push_back(static_cast<int>(majority));
    }
    return tasks;
}

std::string partition_manifest_json(const PartitionSpec& spec, const Partition& partition) {
    nlohmann::json j;
    j["mode"] = partition_mode_name(spec.mode);
    j["alpha"] = spec.alpha;
    j["seed"] = spec.seed;
    j["clients"] = partition;
    return j.dump(2);
}

}  // namespace flexfed::data
