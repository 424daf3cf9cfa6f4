// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/cli/config.hpp"

#include <openssl/sha.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "flexfed/error.hpp"

namespace flexfed::cli {

namespace pt = boost::property_tree;

namespace {

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

template <class T>
T parse_number(const std::string& field, const std::string& value) {
    std::istringstream in(value);
    T out{};
    if (!(in >> out) || !(in >> std::ws).eof()) {
        throw ConfigError(field + ": cannot parse '" + value + "'");
    }
    return out;
}

std::size_t parse_count(const std::string& field, const std::string& value) {
    if (!value.empty() && value[0] == '-') throw ConfigError(field + ": must be nonnegative, got '" + value + "'");
    return parse_number<std::size_t>(field, value);
}

bool parse_bool(const std::string& field, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError(field + ": expected true or false, got '" + value + "'");
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto count = [&](const std::string& key, auto member) {
            t[key] = [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_count(key, v); };
        };
        auto real = [&](const std::string& key, auto member) {
            t[key] = [key, member](ExperimentConfig& c, const std::string& v) {
                member(c) = parse_number<double>(key, v);
            };
        };
        auto flag = [&](const std::string& key, auto member) {
            t[key] = [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(key, v); };
        };
        auto integer = [&](const std::string& key, auto member) {
            t[key] = [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<int>(key, v); };
        };

        count("model.n_layers", [](ExperimentConfig& c) -> auto& { return c.run.model.n_layers; });
        count("model.d_model", [](ExperimentConfig& c) -> auto& { return c.run.model.d_model; });
        count("model.n_heads", [](ExperimentConfig& c) -> auto& { return c.run.model.n_heads; });
        count("model.vocab", [](ExperimentConfig& c) -> auto& { return c.run.model.vocab; });
        count("model.n_experts", [](ExperimentConfig& c) -> auto& { return c.run.model.n_experts; });
        count("model.top_k", [](ExperimentConfig& c) -> auto& { return c.run.model.top_k; });
        count("model.n_shared_experts", [](ExperimentConfig& c) -> auto& { return c.run.model.n_shared_experts; });
        real("model.expert_ratio", [](ExperimentConfig& c) -> auto& { return c.run.model.expert_ratio; });
        real("model.ffn_mult", [](ExperimentConfig& c) -> auto& { return c.run.model.ffn_mult; });
        count("model.max_seq_len", [](ExperimentConfig& c) -> auto& { return c.run.model.max_seq_len; });
        t["model.gate_activation"] = [](ExperimentConfig& c, const std::string& v) {
            c.run.model.gate_activation = num::parse_activation(v);
        };
        flag("model.renormalize_topk", [](ExperimentConfig& c) -> auto& { return c.run.model.renormalize_topk; });
        flag("model.tie_embeddings", [](ExperimentConfig& c) -> auto& { return c.run.model.tie_embeddings; });
        real("model.side_gate_bias", [](ExperimentConfig& c) -> auto& { return c.run.model.side_gate_bias; });

        count("adapters.rank", [](ExperimentConfig& c) -> auto& { return c.run.adapter.rank; });
        real("adapters.alpha", [](ExperimentConfig& c) -> auto& { return c.run.adapter.alpha; });
        real("adapters.init_std", [](ExperimentConfig& c) -> auto& { return c.run.adapter.init_std; });

        t["federation.mode"] = [](ExperimentConfig& c, const std::string& v) { c.run.mode = fed::parse_mode(v); };
        t["federation.strategy"] = [](ExperimentConfig& c, const std::string& v) {
            c.run.server.strategy = fed::parse_strategy(v);
        };
        count("federation.clients", [](ExperimentConfig& c) -> auto& { return c.run.clients; });
        count("federation.clients_per_round", [](ExperimentConfig& c) -> auto& { return c.run.per_round; });
        count("federation.rounds", [](ExperimentConfig& c) -> auto& { return c.run.rounds; });
        count("federation.steps", [](ExperimentConfig& c) -> auto& { return c.run.local.steps; });
        count("federation.batch_size", [](ExperimentConfig& c) -> auto& { return c.run.local.batch_size; });
        real("federation.lr", [](ExperimentConfig& c) -> auto& { return c.run.local.adam.lr; });
        real("federation.mu", [](ExperimentConfig& c) -> auto& { return c.run.local.mu; });
        real("federation.server_lr", [](ExperimentConfig& c) -> auto& { return c.run.server.server_lr; });
        real("federation.momentum", [](ExperimentConfig& c) -> auto& { return c.run.server.momentum; });
        real("federation.beta1", [](ExperimentConfig& c) -> auto& { return c.run.server.beta1; });
        real("federation.beta2", [](ExperimentConfig& c) -> auto& { return c.run.server.beta2; });
        real("federation.tau", [](ExperimentConfig& c) -> auto& { return c.run.server.tau; });
        flag("federation.pin_controls", [](ExperimentConfig& c) -> auto& { return c.run.server.pin_controls; });
        flag("federation.parallel_clients", [](ExperimentConfig& c) -> auto& { return c.run.parallel_clients; });

        count("pruning.calibration_sequences",
              [](ExperimentConfig& c) -> auto& { return c.run.calibration_sequences; });

        t["data.source"] = [](ExperimentConfig& c, const std::string& v) {
            if (v == "synth") {
                c.data.source = DataSource::Synth;
            } else if (v == "jsonl") {
                c.data.source = DataSource::Jsonl;
            } else {
                throw ConfigError("data.source: expected synth or jsonl, got '" + v + "'");
            }
        };
        t["data.train_path"] = [](ExperimentConfig& c, const std::string& v) { c.data.train_path = v; };
        t["data.eval_path"] = [](ExperimentConfig& c, const std::string& v) { c.data.eval_path = v; };
        integer("data.synth_tasks", [](ExperimentConfig& c) -> auto& { return c.data.synth_tasks; });
        integer("data.synth_train_per_task", [](ExperimentConfig& c) -> auto& { return c.data.synth_train_per_task; });
        integer("data.synth_eval_per_task", [](ExperimentConfig& c) -> auto& { return c.data.synth_eval_per_task; });
        t["data.partition"] = [](ExperimentConfig& c, const std::string& v) {
            c.data.partition = data::parse_partition_mode(v);
        };
        real("data.alpha", [](ExperimentConfig& c) -> auto& { return c.data.alpha; });

        count("eval.every_n_rounds", [](ExperimentConfig& c) -> auto& { return c.eval.every_n_rounds; });
        count("eval.max_new_tokens", [](ExperimentConfig& c) -> auto& { return c.eval.max_new_tokens; });
        real("eval.rouge_beta", [](ExperimentConfig& c) -> auto& { return c.eval.rouge_beta; });

        t["run.seed"] = [](ExperimentConfig& c, const std::string& v) {
            c.run.seed = parse_number<std::uint64_t>("run.seed", v);
        };
        count("run.checkpoint_every", [](ExperimentConfig& c) -> auto& { return c.run.checkpoint_every; });
        return t;
    }();
    return table;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

void ExperimentConfig::validate() const {
    run.validate();
    if (data.source == DataSource::Jsonl && data.train_path.empty()) {
        throw ConfigError("data.train_path: required when data.source = jsonl");
    }
    if (data.source == DataSource::Synth) {
        if (data.synth_tasks < 1) throw ConfigError("data.synth_tasks: must be >= 1");
        if (data.synth_train_per_task < 1) throw ConfigError("data.synth_train_per_task: must be >= 1");
        if (data.synth_eval_per_task < 1) throw ConfigError("data.synth_eval_per_task: must be >= 1");
    }
    if (data.partition == data::PartitionMode::Dirichlet && !(data.alpha > 0.0)) {
        throw ConfigError("data.alpha: must be positive");
    }
    if (!(eval.rouge_beta > 0.0)) throw ConfigError("eval.rouge_beta: must be positive");
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
    }
    ExperimentConfig config;
    const auto& table = setters();
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, value] : body) {
            const std::string field = section + "." + key;
            auto it = table.find(field);
            if (it == table.end()) throw ConfigError(field + ": unknown key");
            it->second(config, value.get_value<std::string>());
        }
    }
    for (auto* p : {&config.data.train_path, &config.data.eval_path}) {
        if (!p->empty() && p->is_relative()) *p = base_dir / *p;
    }
    config.run.eval_every = config.eval.every_n_rounds;
    config.text = text;
    config.base_dir = base_dir;
    config.validate();
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path), path.parent_path());
}

fed::FederationData load_data(const ExperimentConfig& config) {
    fed::FederationData out;
    const auto& d = config.data;
    if (d.source == DataSource::Synth) {
        out.train = data::synth_tasks(d.synth_tasks, d.synth_train_per_task, config.run.seed, "train");
        out.eval = data::synth_tasks(d.synth_tasks, d.synth_eval_per_task, config.run.seed, "eval");
    } else {
        if (!std::filesystem::exists(d.train_path)) {
            throw ConfigError("data.train_path: file not found: " + d.train_path.string());
        }
        out.train = data::load_jsonl(d.train_path).corpus;
        if (d.eval_path.empty()) {
            out.eval = out.train;
        } else {
            if (!std::filesystem::exists(d.eval_path)) {
                throw ConfigError("data.eval_path: file not found: " + d.eval_path.string());
            }
            out.eval = data::load_jsonl(d.eval_path).corpus;
            // Label ids are per file; align them with the training labels by name.
            for (auto& e : out.eval.examples) {
                const auto& name = out.eval.label_names.at(static_cast<std::size_t>(e.task_label));
                const auto it = std::find(out.train.label_names.begin(), out.train.label_names.end(), name);
                if (it == out.train.label_names.end()) {
                    throw ConfigError("data.eval_path: category '" + name + "' does not occur in training data");
                }
                e.task_label = static_cast<int>(it - out.train.label_names.begin());
            }
            out.eval.label_names = out.train.label_names;
        }
    }
    data::PartitionSpec spec;
    spec.mode = d.partition;
    spec.alpha = d.alpha;
    spec.clients = config.run.clients;
    spec.seed = config.run.seed;
    out.partition = data::make_partition(out.train, spec);
    return out;
}

std::string content_hash(const std::string& content) {
    const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char b : digest) {
        out += hex[b >> 4];
        out += hex[b & 15];
    }
    return out;
}

}  // namespace flexfed::cli
