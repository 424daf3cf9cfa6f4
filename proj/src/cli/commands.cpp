// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/cli/commands.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "flexfed/cli/checkpoint.hpp"
#include "flexfed/data/partition.hpp"
#include "flexfed/error.hpp"
#include "flexfed/eval/evaluate.hpp"
#include "flexfed/eval/ledger.hpp"
#include "flexfed/pruning/pruning.hpp"

namespace flexfed::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path checkpoint_path(const fs::path& out_dir, std::size_t round) {
    char name[32];
    std::snprintf(name, sizeof name, "round_%04zu.ckpt", round);
    return out_dir / "checkpoints" / name;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(); }

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

json prune_json(const fed::RunState& state) {
    json clients = json::array();
    for (const auto& c : state.clients) {
        if (!c.prune_report) continue;
        json layers = json::array();
        for (const auto& l : c.prune_report->layers) {
            layers.push_back({{"losses", l.losses}, {"selected", l.selected}, {"margin", l.margin}});
        }
        clients.push_back({{"client_id", c.id}, {"layers", std::move(layers)}});
    }
    return clients;
}

json manifest_json(const ExperimentConfig& config, const fs::path& config_path, const fs::path& out_dir,
                   const std::optional<fs::path>& resume) {
    json inputs = json::object();
    inputs[config_path.string()] = content_hash(read_text(config_path));
    for (const auto& p : {config.data.train_path, config.data.eval_path}) {
        if (config.data.source == DataSource::Jsonl && !p.empty() && fs::exists(p)) {
            inputs[p.string()] = content_hash(read_text(p));
        }
    }
    json m;
    m["config"] = config.text;
    m["config_hash"] = content_hash(config.text);
    m["inputs"] = std::move(inputs);
    m["seed"] = config.run.seed;
    m["mode"] = std::string(fed::mode_name(config.run.mode));
    m["strategy"] = std::string(fed::strategy_name(config.run.server.strategy));
    m["checkpoint_version"] = kCheckpointVersion;
    m["out_dir"] = out_dir.string();
    m["resumed_from"] = resume ? json(resume->string()) : json();
    return m;
}

json report_json(const ExperimentConfig& config, const fed::RunState& state, const std::vector<double>& final_loss) {
    const auto summary = eval::ledger_summary(state.ledger);
    json r;
    r["mode"] = std::string(fed::mode_name(config.run.mode));
    r["strategy"] = std::string(fed::strategy_name(config.run.server.strategy));
    r["rounds"] = state.rounds_done;
    r["clients"] = state.clients.size();
    json initial = json::array(), final = json::array();
    for (double v : state.initial_eval_loss) initial.push_back(finite_or_null(v));
    for (double v : final_loss) final.push_back(finite_or_null(v));
    r["initial_eval_loss"] = std::move(initial);
    r["final_eval_loss"] = std::move(final);
    r["mean_initial_eval_loss"] = finite_or_null(mean(state.initial_eval_loss));
    r["mean_final_eval_loss"] = finite_or_null(mean(final_loss));
    r["communication"] = {{"up_params", summary.up_params},
                          {"down_params", summary.down_params},
                          {"up_bytes", summary.up_bytes},
                          {"down_bytes", summary.down_bytes},
                          {"params_by_group", summary.params_by_group}};
    r["payload_params_per_client"] = fed::payload_params(config.run.model, config.run.mode, config.run.adapter);
    r["pruning"] = prune_json(state);
    return r;
}

template <class Fn>
int guarded(const char* command, Fn fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        spdlog::error("{}: invalid configuration: {}", command, e.what());
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InputError& e) {
        spdlog::error("{}: bad input: {}", command, e.what());
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const CorruptionError& e) {
        std::cerr << "error: corrupt checkpoint: " << e.what() << '\n';
        return kExitCheckpoint;
    } catch (const VersionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitCheckpoint;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << command << ": " << e.what() << '\n';
        return kExitFailure;
    }
}

ExperimentConfig load_with_overrides(const fs::path& config_path, const Overrides& overrides) {
    if (!fs::exists(config_path)) throw ConfigError("--config: file not found: " + config_path.string());
    auto config = load_config(config_path);
    apply_overrides(config, overrides);
    return config;
}

}  // namespace

void apply_overrides(ExperimentConfig& config, const Overrides& overrides) {
    if (overrides.seed) config.run.seed = *overrides.seed;
    if (overrides.mode) config.run.mode = *overrides.mode;
    config.validate();
}

void init_logging() {
    auto logger = spdlog::stderr_color_mt("flexfed");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");
    auto level = spdlog::level::warn;
    if (const char* env = std::getenv("FLEXFED_LOG_LEVEL")) {
        level = spdlog::level::from_str(env);
        // from_str maps unknown names to off.
        if (level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::warn;
    }
    spdlog::set_level(level);
}

int cmd_run(const fs::path& config_path, const fs::path& out_dir, const Overrides& overrides,
            const std::optional<fs::path>& resume) {
    return guarded("run", [&] {
        const auto config = load_with_overrides(config_path, overrides);
        const auto data = load_data(config);
        const auto& rc = config.run;
        fs::create_directories(out_dir / "checkpoints");
        write_text(out_dir / "manifest.json", manifest_json(config, config_path, out_dir, resume).dump(2) + "\n");

        auto base = model::ModelParams::init(rc.model, rc.seed);
        spdlog::info("initializing {} clients, mode {}", rc.clients, fed::mode_name(rc.mode));
        auto state = fed::init_federation(rc, base, data);
        const bool checkpoints = rc.checkpoint_every != 0;
        if (resume) {
            auto ck = load_checkpoint(*resume);
            if (ck.config.text != config.text || ck.config.run.seed != rc.seed || ck.config.run.mode != rc.mode) {
                throw ConfigError("--resume: checkpoint was written by a different config, seed or mode");
            }
            spdlog::info("resuming from {} after round {}", resume->string(), ck.state.rounds_done);
            base = std::move(ck.base);
            restore_state(state, std::move(ck.state));
        } else if (checkpoints) {
            // Later checkpoints are taken from f32-rounded state; round 0 matches.
            fed::quantize_state(state);
            save_checkpoint(checkpoint_path(out_dir, 0), config, base, state);
        }

        fed::run_rounds(state, rc, base, [&](const fed::RunState& s) {
            const auto round = s.rounds_done;
            for (auto it = s.metrics.rbegin(); it != s.metrics.rend() && it->round == round; ++it) {
                if (!std::isfinite(it->train_loss)) {
                    throw NumericError("round " + std::to_string(round) + ": client " + std::to_string(it->client_id) +
                                       " produced a non-finite training loss; last good checkpoint kept");
                }
            }
            spdlog::info("round {}/{} done", round, rc.rounds);
            if (checkpoints && (round % rc.checkpoint_every == 0 || round == rc.rounds)) {
                save_checkpoint(checkpoint_path(out_dir, round), config, base, s);
            }
            write_text(out_dir / "metrics.csv", fed::metrics_csv(s.metrics));
        });

        const auto final_loss = fed::evaluate_all(state, rc, base);
        write_text(out_dir / "metrics.csv", fed::metrics_csv(state.metrics));
        write_text(out_dir / "ledger.csv", state.ledger.to_csv());
        write_text(out_dir / "report.json", report_json(config, state, final_loss).dump(2) + "\n");
        spdlog::info("mean eval loss {:.4f} -> {:.4f}", mean(state.initial_eval_loss), mean(final_loss));
        return kExitOk;
    });
}

int cmd_prune(const fs::path& config_path, const fs::path& out, const Overrides& overrides) {
    return guarded("prune", [&] {
        const auto config = load_with_overrides(config_path, overrides);
        const auto data = load_data(config);
        const auto& rc = config.run;
        const auto base = model::ModelParams::init(rc.model, rc.seed);
        json clients = json::array();
        for (std::size_t c = 0; c < data.partition.size(); ++c) {
            const auto seqs = pruning::calibration_sequences(data.train, data.partition[c], rc.model.max_seq_len,
                                                             rc.calibration_sequences);
            const auto report = pruning::select_personalized_experts(base, pruning::record_moe_inputs(base, seqs));
            json layers = json::array();
            for (const auto& l : report.layers) {
                layers.push_back({{"losses", l.losses}, {"selected", l.selected}, {"margin", l.margin}});
            }
            clients.push_back({{"client_id", c}, {"layers", std::move(layers)}});
        }
        json r = {{"seed", rc.seed}, {"n_experts", rc.model.n_experts}, {"clients", std::move(clients)}};
        write_text(out, r.dump(2) + "\n");
        return kExitOk;
    });
}

int cmd_eval(const fs::path& checkpoint, const fs::path& out, const std::optional<fs::path>& config_path) {
    return guarded("eval", [&] {
        auto ck = load_checkpoint(checkpoint);
        ExperimentConfig data_config = ck.config;
        if (config_path) {
            data_config = load_config(*config_path);
            data_config.run.seed = ck.config.run.seed;
        }
        const auto data = load_data(data_config);
        const auto eval_tasks = data::assign_eval_tasks(data.train, data.partition);
        if (eval_tasks.size() != ck.state.clients.size()) {
            throw ConfigError("data: partition has " + std::to_string(eval_tasks.size()) + " clients, checkpoint has " +
                              std::to_string(ck.state.clients.size()));
        }
        const auto& rc = ck.config.run;
        eval::EvalOptions options;
        options.max_new_tokens = data_config.eval.max_new_tokens;
        options.rouge_beta = data_config.eval.rouge_beta;

        json clients = json::array();
        std::vector<double> losses;
        for (auto& client : ck.state.clients) {
            if (rc.mode != fed::Mode::LocalOnly) fed::load_shared(client.adapters, ck.state.server.global);
            std::vector<data::Example> examples;
            const auto& tasks = eval_tasks[client.id];
            for (const auto& e : data.eval.examples) {
                if (std::find(tasks.begin(), tasks.end(), e.task_label) != tasks.end()) examples.push_back(e);
            }
            const auto r = eval::eval_client(ck.base, client.forward_options(), examples, options);
            losses.push_back(r.loss);
            clients.push_back({{"client_id", client.id},
                               {"examples", r.examples},
                               {"eval_loss", finite_or_null(r.loss)},
                               {"rouge_l_f", r.rouge_f ? json(*r.rouge_f) : json()}});
        }
        json result = {{"checkpoint", checkpoint.string()},
                       {"round", ck.state.rounds_done},
                       {"mean_eval_loss", finite_or_null(mean(losses))},
                       {"clients", std::move(clients)}};
        write_text(out, result.dump(2) + "\n");
        return kExitOk;
    });
}

int cmd_inspect(const fs::path& checkpoint) {
    return guarded("inspect-checkpoint", [&] {
        std::cout << describe_checkpoint(checkpoint);
        return kExitOk;
    });
}

}  // namespace flexfed::cli
