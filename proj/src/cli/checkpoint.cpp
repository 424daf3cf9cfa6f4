// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/cli/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "flexfed/error.hpp"

namespace flexfed::cli {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'L', 'E', 'X', 'C', 'K', 'P', 'T'};
constexpr char kTrailer[8] = {'T', 'N', 'E', 'N', 'D', '!', '\n', '\0'};

using json = nlohmann::json;

struct Entry {
    num::Shape shape;
    std::vector<double> values;
};

using Table = std::map<std::string, Entry>;

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof v);
    }
    void bytes(const std::string& s) { buf_.append(s); }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    [[nodiscard]] const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    template <class T>
    T pod(const char* what) {
        T v;
        std::memcpy(&v, take(sizeof v, what), sizeof v);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) { return std::string(take(n, what), n); }
    [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
    [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }

private:
    const char* take(std::size_t n, const char* what) {
        if (n > data_.size() - pos_) {
            throw CorruptionError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                  std::to_string(pos_));
        }
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::string data_;
    std::size_t pos_ = 0;
};

void put(Table& t, const std::string& name, const num::Tensor& tensor) {
    const auto d = tensor.data();
    t[name] = {tensor.shape(), std::vector<double>(d.begin(), d.end())};
}

void put(Table& t, const std::string& prefix, const fed::ParamMap& m) {
    for (const auto& [k, v] : m) t[prefix + k] = {{v.size()}, v};
}

json double_or_null(double v) { return std::isfinite(v) ? json(v) : json(); }

double null_or_double(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

json report_json(const pruning::PruneReport& r) {
    json layers = json::array();
    for (const auto& l : r.layers) layers.push_back({{"losses", l.losses}, {"selected", l.selected}, {"margin", l.margin}});
    return layers;
}

pruning::PruneReport report_from(const json& j) {
    pruning::PruneReport r;
    for (const auto& l : j) {
        pruning::LayerReport lr;
        lr.losses = l.at("losses").get<std::vector<double>>();
        lr.selected = l.at("selected").get<std::size_t>();
        lr.margin = l.at("margin").get<double>();
        r.layers.push_back(std::move(lr));
    }
    return r;
}

std::string client_prefix(std::size_t id) { return "client/" + std::to_string(id) + "/"; }

Table build_table(const model::ModelParams& base, const fed::RunState& state) {
    Table t;
    for (const auto& [name, tensor] : base.tensors()) put(t, "base/" + name, tensor);
    put(t, "server/global/", state.server.global);
    put(t, "server/m/", state.server.m);
    put(t, "server/v/", state.server.v);
    put(t, "server/control/", state.server.control);
    for (const auto& c : state.clients) {
        const auto p = client_prefix(c.id);
        for (const auto& np : c.adapters.parameters()) put(t, p + "param/" + np.name, np.tensor);
        for (const auto& [name, slot] : c.adam.slots) {
            t[p + "adam_m/" + name] = {{slot.m.size()}, slot.m};
            t[p + "adam_v/" + name] = {{slot.v.size()}, slot.v};
        }
        put(t, p + "control/", c.control);
        for (std::size_t l = 0; l < c.personalized.layers.size(); ++l) {
            const auto& s = c.personalized.layers[l];
            const auto sp = p + "side/" + std::to_string(l) + "/";
            put(t, sp + "gate", s.gate);
            put(t, sp + "up", s.up);
            put(t, sp + "down", s.down);
        }
    }
    return t;
}

json build_header(const ExperimentConfig& config, const fed::RunState& state) {
    json h;
    h["config"] = config.text;
    h["config_dir"] = config.base_dir.string();
    // Command-line overrides are not part of the text.
    h["seed"] = config.run.seed;
    h["mode"] = std::string(fed::mode_name(config.run.mode));
    h["rounds_done"] = state.rounds_done;
    h["server_round"] = state.server.round;
    h["total_clients"] = state.server.total_clients;
    json metrics = json::array();
    for (const auto& r : state.metrics) {
        metrics.push_back({r.round, r.client_id, double_or_null(r.train_loss),
                           r.eval_loss ? double_or_null(*r.eval_loss) : json(), r.uploaded, r.downloaded, r.wall_ms});
    }
    h["metrics"] = std::move(metrics);
    json ledger = json::array();
    for (const auto& r : state.ledger.rows()) {
        ledger.push_back({r.round, eval::direction_name(r.direction), r.client_id, r.group, r.params});
    }
    h["ledger"] = std::move(ledger);
    json initial = json::array();
    for (double v : state.initial_eval_loss) initial.push_back(double_or_null(v));
    h["initial_eval_loss"] = std::move(initial);
    json clients = json::array();
    for (const auto& c : state.clients) {
        json cj = {{"id", c.id}, {"adam_step", c.adam.step}};
        cj["prune_report"] = c.prune_report ? report_json(*c.prune_report) : json();
        json selected = json::array();
        for (const auto& l : c.personalized.layers) selected.push_back(l.selected_expert);
        cj["selected"] = std::move(selected);
        clients.push_back(std::move(cj));
    }
    h["clients"] = std::move(clients);
    return h;
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct Parsed {
    std::uint32_t version = 0;
    json header;
    Table table;
    std::vector<std::string> order;
};

Parsed parse(const std::filesystem::path& path) {
    Reader r(read_all(path));
    Parsed out;
    if (r.bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
        throw CorruptionError(path.string() + " is not a checkpoint (bad magic)");
    }
    out.version = r.pod<std::uint32_t>("version");
    if (out.version != kCheckpointVersion) {
        throw VersionError("checkpoint format version " + std::to_string(out.version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len = r.pod<std::uint64_t>("header length");
    if (header_len > r.remaining()) throw CorruptionError("checkpoint truncated inside the header");
    try {
        out.header = json::parse(r.bytes(header_len, "header"));
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const auto count = r.pod<std::uint64_t>("tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.pod<std::uint32_t>("name length");
        auto name = r.bytes(len, "tensor name");
        const auto rank = r.pod<std::uint32_t>("rank");
        if (rank > 8) throw CorruptionError("tensor " + name + " has implausible rank " + std::to_string(rank));
        Entry e;
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.pod<std::uint64_t>("shape"));
        const std::size_t n = num::shape_numel(e.shape);
        if (n > r.remaining() / sizeof(float)) throw CorruptionError("checkpoint truncated inside tensor " + name);
        e.values.resize(n);
        for (auto& v : e.values) v = static_cast<double>(r.pod<float>("tensor values"));
        out.order.push_back(name);
        out.table.emplace(std::move(name), std::move(e));
    }
    if (r.bytes(sizeof kTrailer, "trailer") != std::string(kTrailer, sizeof kTrailer) || !r.at_end()) {
        throw CorruptionError("checkpoint trailer missing or followed by extra bytes");
    }
    return out;
}

const Entry& need(const Table& t, const std::string& name) {
    auto it = t.find(name);
    if (it == t.end()) throw CorruptionError("checkpoint is missing tensor " + name);
    return it->second;
}

void fill(const Table& t, const std::string& name, const num::Tensor& target) {
    const auto& e = need(t, name);
    if (e.shape != target.shape()) {
        throw CorruptionError("tensor " + name + " has shape " + num::shape_str(e.shape) + ", expected " +
                              num::shape_str(target.shape()));
    }
    auto d = num::Tensor(target).mutable_data();
    std::copy(e.values.begin(), e.values.end(), d.begin());
}

fed::ParamMap collect(const Table& t, const std::string& prefix) {
    fed::ParamMap m;
    for (auto it = t.lower_bound(prefix); it != t.end() && it->first.rfind(prefix, 0) == 0; ++it) {
        m[it->first.substr(prefix.size())] = it->second.values;
    }
    return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const model::ModelParams& base, const fed::RunState& state) {
    const auto table = build_table(base, state);
    const std::string header = build_header(config, state).dump();
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.pod(kCheckpointVersion);
    w.pod(static_cast<std::uint64_t>(header.size()));
    w.bytes(header);
    w.pod(static_cast<std::uint64_t>(table.size()));
    for (const auto& [name, e] : table) {
        w.pod(static_cast<std::uint32_t>(name.size()));
        w.bytes(name);
        w.pod(static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) w.pod(static_cast<std::uint64_t>(d));
        for (double v : e.values) w.pod(static_cast<float>(v));
    }
    w.raw(kTrailer, sizeof kTrailer);

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    auto parsed = parse(path);
    const auto& h = parsed.header;
    const auto& t = parsed.table;
    Checkpoint ck;
    ck.version = parsed.version;
    try {
        ck.config = parse_config(h.at("config").get<std::string>(), h.at("config_dir").get<std::string>());
        ck.config.run.seed = h.at("seed").get<std::uint64_t>();
        ck.config.run.mode = fed::parse_mode(h.at("mode").get<std::string>());

        std::map<std::string, num::Tensor> base;
        const std::string bp = "base/";
        for (auto it = t.lower_bound(bp); it != t.end() && it->first.rfind(bp, 0) == 0; ++it) {
            base.emplace(it->first.substr(bp.size()), num::Tensor::from(it->second.shape, it->second.values));
        }
        ck.base = model::ModelParams(ck.config.run.model, std::move(base));

        auto& s = ck.state;
        s.rounds_done = h.at("rounds_done").get<std::size_t>();
        s.server.options = ck.config.run.server;
        s.server.round = h.at("server_round").get<std::uint64_t>();
        s.server.total_clients = h.at("total_clients").get<std::size_t>();
        s.server.global = collect(t, "server/global/");
        s.server.m = collect(t, "server/m/");
        s.server.v = collect(t, "server/v/");
        s.server.control = collect(t, "server/control/");
        for (const auto& r : h.at("metrics")) {
            fed::MetricsRow row;
            row.round = r.at(0).get<std::size_t>();
            row.client_id = r.at(1).get<std::size_t>();
            row.train_loss = null_or_double(r.at(2));
            if (!r.at(3).is_null()) row.eval_loss = r.at(3).get<double>();
            row.uploaded = r.at(4).get<std::size_t>();
            row.downloaded = r.at(5).get<std::size_t>();
            row.wall_ms = r.at(6).get<double>();
            s.metrics.push_back(row);
        }
        for (const auto& r : h.at("ledger")) {
            const auto dir = r.at(1).get<std::string>() == "up" ? eval::Direction::Up : eval::Direction::Down;
            s.ledger.record(r.at(0).get<std::size_t>(), dir, r.at(2).get<std::size_t>(), r.at(3).get<std::string>(),
                            r.at(4).get<std::size_t>());
        }
        for (const auto& v : h.at("initial_eval_loss")) s.initial_eval_loss.push_back(null_or_double(v));

        const auto& rc = ck.config.run;
        for (const auto& cj : h.at("clients")) {
            fed::ClientState c;
            c.id = cj.at("id").get<std::size_t>();
            const auto p = client_prefix(c.id);
            c.adapters = adapters::attach_adapters(rc.model, fed::mode_targets(rc.mode), rc.adapter, 0);
            for (const auto& np : c.adapters.parameters()) fill(t, p + "param/" + np.name, np.tensor);
            c.adam.step = cj.at("adam_step").get<std::uint64_t>();
            for (const auto& np : c.adapters.parameters()) {
                auto m = t.find(p + "adam_m/" + np.name);
                if (m == t.end()) continue;
                c.adam.slots[np.name] = {m->second.values, need(t, p + "adam_v/" + np.name).values};
            }
            c.control = collect(t, p + "control/");
            if (!cj.at("prune_report").is_null()) c.prune_report = report_from(cj.at("prune_report"));
            const auto selected = cj.at("selected").get<std::vector<std::size_t>>();
            for (std::size_t l = 0; l < selected.size(); ++l) {
                const auto sp = p + "side/" + std::to_string(l) + "/";
                model::PersonalizedLayerState layer;
                layer.selected_expert = selected[l];
                for (auto [name, slot] : {std::pair{"gate", &layer.gate}, {"up", &layer.up}, {"down", &layer.down}}) {
                    const auto& e = need(t, sp + name);
                    *slot = num::Tensor::from(e.shape, e.values);
                }
                c.personalized.layers.push_back(std::move(layer));
            }
            s.clients.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("checkpoint header is malformed: ") + e.what());
    }
    return ck;
}

std::string describe_checkpoint(const std::filesystem::path& path) {
    const auto parsed = parse(path);
    std::ostringstream out;
    out << "version: " << parsed.version << '\n';
    out << "rounds_done: " << parsed.header.at("rounds_done").get<std::size_t>() << '\n';
    out << "clients: " << parsed.header.at("clients").size() << '\n';
    out << "tensors: " << parsed.order.size() << '\n';
    for (const auto& name : parsed.order) {
        out << "  " << name << ' ' << num::shape_str(parsed.table.at(name).shape) << '\n';
    }
    out << "config:\n" << parsed.header.at("config").get<std::string>();
    return out.str();
}

void restore_state(fed::RunState& fresh, fed::RunState&& saved) {
    if (fresh.clients.size() != saved.clients.size()) {
        throw CorruptionError("checkpoint holds " + std::to_string(saved.clients.size()) + " clients, config has " +
                              std::to_string(fresh.clients.size()));
    }
    for (std::size_t i = 0; i < fresh.clients.size(); ++i) {
        auto& f = fresh.clients[i];
        auto& s = saved.clients[i];
        if (f.id != s.id) throw CorruptionError("checkpoint client order differs from the config");
        f.adapters = std::move(s.adapters);
        f.personalized = std::move(s.personalized);
        f.prune_report = std::move(s.prune_report);
        f.adam = std::move(s.adam);
        f.control = std::move(s.control);
    }
    fresh.server = std::move(saved.server);
    fresh.rounds_done = saved.rounds_done;
    fresh.metrics = std::move(saved.metrics);
    fresh.ledger = std::move(saved.ledger);
    fresh.initial_eval_loss = std::move(saved.initial_eval_loss);
}

}  // namespace flexfed::cli
