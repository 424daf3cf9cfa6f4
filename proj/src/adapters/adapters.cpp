// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/adapters/adapters.hpp"

#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>

#include "flexfed/error.hpp"
#include "flexfed/model/params.hpp"
#include "flexfed/numerics/ops.hpp"

namespace flexfed::adapters {

std::string_view group_name(ParamGroup group) {
    switch (group) {
        case ParamGroup::SharedAttention: return "shared_attention";
        case ParamGroup::LocalExpert: return "local_expert";
        case ParamGroup::LocalGate: return "local_gate";
        case ParamGroup::SharedExpert: return "shared_expert";
    }
    return "unknown";
}

ParamGroup parse_group(std::string_view name) {
    for (auto g : {ParamGroup::SharedAttention, ParamGroup::LocalExpert, ParamGroup::LocalGate,
                   ParamGroup::SharedExpert}) {
        if (group_name(g) == name) return g;
    }
    throw ConfigError("unknown parameter group '" + std::string(name) + "'");
}

bool is_shared(ParamGroup group) {
    return group == ParamGroup::SharedAttention || group == ParamGroup::SharedExpert;
}

num::Tensor LoraAdapter::delta() const {
    const std::size_t in = a.dim(1), out = b.dim(0);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> d(in * out, 0.0);
    const double s = scaling();
    for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t o = 0; o < out; ++o) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rank; ++r) acc += bd[o * rank + r] * ad[r * in + i];
            d[i * out + o] = s * acc;
        }
    }
    return num::Tensor::from({in, out}, std::move(d));
}

num::Tensor lora_apply(const num::Tensor& x, const num::Tensor& base_w, const LoraAdapter* adapter) {
    auto y = num::matmul(x, base_w);
    if (adapter == nullptr) return y;
    if (adapter->a.dim(1) != base_w.dim(0) || adapter->b.dim(0) != base_w.dim(1)) {
        throw DimensionError("adapter on '" + adapter->target + "' does not match base shape " +
                             num::shape_str(base_w.shape()));
    }
    auto low = num::matmul_bt(num::matmul_bt(x, adapter->a), adapter->b);
    return num::add(y, num::scale(low, adapter->scaling()));
}

void AdapterSet::add_lora(const std::string& target, ParamGroup group, std::size_t in, std::size_t out,
                          const AdapterOptions& options, num::RngStream& rng) {
    if (lora_.count(target) || gates_.count(target)) throw ConfigError("duplicate adapter target '" + target + "'");
    if (options.rank < 1) throw ConfigError("adapter rank must be >= 1");
    std::vector<double> a(options.rank * in);
    for (auto& v : a) v = static_cast<double>(static_cast<float>(rng.normal(0.0, options.init_std)));
    LoraAdapter adapter;
    adapter.target = target;
    adapter.group = group;
    adapter.a = num::Tensor::parameter({options.rank, in}, std::move(a));
    adapter.b = num::Tensor::parameter({out, options.rank}, std::vector<double>(out * options.rank, 0.0));
    adapter.rank = options.rank;
    adapter.alpha = options.alpha;
    lora_.emplace(target, std::move(adapter));
}

void AdapterSet::add_gate(const std::string& target, std::size_t d, double bias) {
    if (lora_.count(target) || gates_.count(target)) throw ConfigError("duplicate adapter target '" + target + "'");
    GateLinear gate;
    gate.target = target;
    gate.weight = num::Tensor::parameter({d, 1}, std::vector<double>(d, 0.0));
    gate.bias = num::Tensor::parameter({1}, {bias});
    gates_.emplace(target, std::move(gate));
}

const LoraAdapter* AdapterSet::find(const std::string& target) const {
    auto it = lora_.find(target);
    return it == lora_.end() ? nullptr : &it->second;
}

const GateLinear* AdapterSet::find_gate(const std::string& target) const {
    auto it = gates_.find(target);
    return it == gates_.end() ? nullptr : &it->second;
}

std::vector<num::NamedTensor> AdapterSet::parameters() const {
    std::map<std::string, num::Tensor> all;
    for (const auto& [t, ad] : lora_) {
        all.emplace(t + ".lora_A", ad.a);
        all.emplace(t + ".lora_B", ad.b);
    }
    for (const auto& [t, g] : gates_) {
        all.emplace(t + ".weight", g.weight);
        all.emplace(t + ".bias", g.bias);
    }
    std::vector<num::NamedTensor> out;
    out.reserve(all.size());
    for (auto& [name, tensor] : all) out.push_back({name, tensor});
    return out;
}

std::vector<num::NamedTensor> AdapterSet::parameters(ParamGroup group) const {
    std::vector<num::NamedTensor> out;
    for (auto& p : parameters()) {
        if (group_of(p.name) == group) out.push_back(std::move(p));
    }
    return out;
}

std::vector<num::NamedTensor> AdapterSet::shared_parameters() const {
    std::vector<num::NamedTensor> out;
    for (auto& p : parameters()) {
        if (is_shared(group_of(p.name))) out.push_back(std::move(p));
    }
    return out;
}

ParamGroup AdapterSet::group_of(const std::string& param_name) const {
    const auto dot = param_name.rfind('.');
    const std::string target = dot == std::string::npos ? param_name : param_name.substr(0, dot);
    if (auto it = lora_.find(target); it != lora_.end()) return it->second.group;
    if (gates_.count(target)) return ParamGroup::LocalGate;
    throw ConfigError("unknown adapter parameter '" + param_name + "'");
}

std::size_t AdapterSet::count_params() const {
    std::size_t n = 0;
    for (const auto& [_, a] : lora_) n += a.param_count();
    for (const auto& [_, g] : gates_) n += g.param_count();
    return n;
}

std::size_t AdapterSet::count_params(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& [_, a] : lora_) {
        if (a.group == group) n += a.param_count();
    }
    if (group == ParamGroup::LocalGate) {
        for (const auto& [_, g] : gates_) n += g.param_count();
    }
    return n;
}

AdapterSet AdapterSet::clone() const {
    AdapterSet out;
    for (const auto& [t, a] : lora_) {
        LoraAdapter c = a;
        c.a = a.a.clone();
        c.b = a.b.clone();
        out.lora_.emplace(t, std::move(c));
    }
    for (const auto& [t, g] : gates_) {
        GateLinear c = g;
        c.weight = g.weight.clone();
        c.bias = g.bias.clone();
        out.gates_.emplace(t, std::move(c));
    }
    return out;
}

namespace {

struct TargetInfo {
    ParamGroup group;
    std::size_t in;
    std::size_t out;
    bool gate;
};

std::map<std::string, TargetInfo> target_table(const model::ModelConfig& c) {
    const std::size_t d = c.d_model, h = c.expert_hidden();
    std::map<std::string, TargetInfo> t;
    auto expert = [&](auto name_of, ParamGroup g) {
        t[name_of("gate")] = {g, d, h, false};
        t[name_of("up")] = {g, d, h, false};
        t[name_of("down")] = {g, h, d, false};
    };
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (auto p : model::kAttnProjections) t[model::attn_name(l, p)] = {ParamGroup::SharedAttention, d, d, false};
        expert([&](std::string_view m) { return model::side_name(l, m); }, ParamGroup::LocalExpert);
        t[model::side_router_name(l)] = {ParamGroup::LocalGate, d, 1, true};
        for (std::size_t e = 0; e < c.n_experts; ++e) {
            expert([&](std::string_view m) { return model::expert_name(l, e, m); }, ParamGroup::SharedExpert);
        }
        for (std::size_t e = 0; e < c.n_shared_experts; ++e) {
            expert([&](std::string_view m) { return model::shared_expert_name(l, e, m); }, ParamGroup::SharedExpert);
        }
    }
    return t;
}

std::vector<std::string> family_targets(const model::ModelConfig& c, const AdapterTargets& targets) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        if (targets.attention) {
            for (auto p : model::kAttnProjections) names.push_back(model::attn_name(l, p));
        }
        if (targets.side_expert) {
            for (auto m : model::kExpertMatrices) names.push_back(model::side_name(l, m));
            names.push_back(model::side_router_name(l));
        }
        if (targets.all_experts) {
            for (std::size_t e = 0; e < c.n_experts; ++e) {
                for (auto m : model::kExpertMatrices) names.push_back(model::expert_name(l, e, m));
            }
            for (std::size_t e = 0; e < c.n_shared_experts; ++e) {
                for (auto m : model::kExpertMatrices) names.push_back(model::shared_expert_name(l, e, m));
            }
        }
    }
    return names;
}

}  // namespace

AdapterSet attach_adapters(const model::ModelConfig& config, const std::vector<std::string>& targets,
                           const AdapterOptions& options, std::uint64_t seed) {
    config.validate();
    const auto table = target_table(config);
    const num::RngStream root(seed, "adapters", "init");
    AdapterSet set;
    for (const auto& name : targets) {
        auto it = table.find(name);
        if (it == table.end()) throw ConfigError("unknown adapter target '" + name + "'");
        const auto& info = it->second;
        if (info.gate) {
            set.add_gate(name, info.in, config.side_gate_bias);
        } else {
            auto rng = root.split(name);
            set.add_lora(name, info.group, info.in, info.out, options, rng);
        }
    }
    return set;
}

AdapterSet attach_adapters(const model::ModelConfig& config, const AdapterTargets& targets,
                           const AdapterOptions& options, std::uint64_t seed) {
    return attach_adapters(config, family_targets(config, targets), options, seed);
}

std::size_t count_params(const model::ModelConfig& c, const AdapterTargets& targets, const AdapterOptions& options,
                         std::optional<ParamGroup> group) {
    const std::size_t d = c.d_model, h = c.expert_hidden(), r = options.rank;
    auto want = [&](ParamGroup g) { return !group || *group == g; };
    const std::size_t per_attention = 4 * r * (d + d);
    const std::size_t per_expert = 3 * r * (d + h);
    std::size_t per_layer = 0;
    if (targets.attention && want(ParamGroup::SharedAttention)) per_layer += per_attention;
    if (targets.side_expert && want(ParamGroup::LocalExpert)) per_layer += per_expert;
    if (targets.side_expert && want(ParamGroup::LocalGate)) per_layer += d + 1;
    if (targets.all_experts && want(ParamGroup::SharedExpert)) {
        per_layer += (c.n_experts + c.n_shared_experts) * per_expert;
    }
    return c.n_layers * per_layer;
}

namespace {

void write_values(std::ostringstream& out, const num::Tensor& t) {
    char buf[64];
    for (double v : t.data()) {
        std::snprintf(buf, sizeof buf, " %a", v);
        out << buf;
    }
}

std::vector<double> read_values(std::istringstream& in, std::size_t n, const std::string& what) {
    std::vector<double> v(n);
    for (auto& x : v) {
        std::string tok;
        if (!(in >> tok)) throw CorruptionError("adapter text: truncated values for " + what);
        char* end = nullptr;
        x = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') throw CorruptionError("adapter text: bad number '" + tok + "'");
    }
    return v;
}

}  // namespace

std::string serialize(const AdapterSet& set) {
    std::ostringstream out;
    char buf[64];
    for (const auto& [t, a] : set.lora()) {
        std::snprintf(buf, sizeof buf, "%a", a.alpha);
        out << "lora " << t << ' ' << group_name(a.group) << ' ' << a.rank << ' ' << buf << ' ' << a.a.dim(1) << ' '
            << a.b.dim(0);
        write_values(out, a.a);
        write_values(out, a.b);
        out << '\n';
    }
    for (const auto& [t, g] : set.gates()) {
        out << "gate " << t << ' ' << g.weight.dim(0);
        write_values(out, g.weight);
        write_values(out, g.bias);
        out << '\n';
    }
    return out.str();
}

AdapterSet deserialize(std::string_view text) {
    AdapterSet set;
    std::istringstream lines{std::string(text)};
    std::string line;
    num::RngStream unused(0, "adapters", "deserialize");
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        std::istringstream in(line);
        std::string kind, target;
        in >> kind >> target;
        if (kind == "lora") {
            std::string group, alpha_tok;
            std::size_t rank = 0, rows = 0, cols = 0;
            if (!(in >> group >> rank >> alpha_tok >> rows >> cols) || rank == 0) {
                throw CorruptionError("adapter text: bad header for " + target);
            }
            AdapterOptions opt{rank, std::strtod(alpha_tok.c_str(), nullptr), 0.0};
            set.add_lora(target, parse_group(group), rows, cols, opt, unused);
            const auto* a = set.find(target);
            auto av = read_values(in, rank * rows, target);
            auto bv = read_values(in, cols * rank, target);
            auto ad = num::Tensor(a->a).mutable_data();
            auto bd = num::Tensor(a->b).mutable_data();
            std::copy(av.begin(), av.end(), ad.begin());
            std::copy(bv.begin(), bv.end(), bd.begin());
        } else if (kind == "gate") {
            std::size_t d = 0;
            if (!(in >> d) || d == 0) throw CorruptionError("adapter text: bad gate header for " + target);
            set.add_gate(target, d, 0.0);
            const auto* g = set.find_gate(target);
            auto wv = read_values(in, d, target);
            auto bv = read_values(in, 1, target);
            auto wd = num::Tensor(g->weight).mutable_data();
            std::copy(wv.begin(), wv.end(), wd.begin());
            num::Tensor(g->bias).mutable_data()[0] = bv[0];
        } else {
            throw CorruptionError("adapter text: unknown record '" + kind + "'");
        }
    }
    return set;
}

}  // namespace flexfed::adapters
