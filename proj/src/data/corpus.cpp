// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/data/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "flexfed/data/tokenizer.hpp"
#include "flexfed/error.hpp"
#include "flexfed/numerics/rng.hpp"

namespace flexfed::data {

namespace {

constexpr std::string_view kHeader =
    "Below is an instruction that describes a task. Write a response that appropriately completes the "
    "request.\n\n### Instruction:\n";
constexpr std::string_view kResponse = " \n\n### Response: \n";

}  // namespace

std::string render_alpaca_prompt(const Example& example) {
    std::string text(kHeader);
    text += example.instruction;
    if (!example.input.empty()) {
        text += '\n';
        text += example.input;
    }
    text += kResponse;
    return text;
}

std::string render_alpaca_training_text(const Example& example) {
    return render_alpaca_prompt(example) + example.output + "\n";
}

EncodedExample encode_example(const Example& example, std::size_t max_seq_len) {
    const auto prompt = encode_bytes(render_alpaca_prompt(example));
    const auto response = encode_bytes(example.output + "\n");
    std::vector<int> ids;
    ids.reserve(prompt.size() + response.size() + 2);
    ids.push_back(kBos);
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    const std::size_t response_start = ids.size();
    ids.insert(ids.end(), response.begin(), response.end());
    ids.push_back(kEos);

    EncodedExample out;
    const std::size_t n = std::min(ids.size() - 1, max_seq_len);
    out.tokens.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
    out.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool in_response = i + 1 >= response_start;
        out.targets[i] = in_response ? ids[i + 1] : -100;
        out.loss_tokens += in_response ? 1 : 0;
    }
    return out;
}

model::Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> order,
                        bool share_prefix) {
    std::size_t prefix = 0;
    if (share_prefix && order.size() > 1) {
        const auto& first = examples[order[0]];
        prefix = first.tokens.size() - 1;  // every suffix keeps at least one token
        for (auto idx : order) {
            const auto& e = examples[idx];
            prefix = std::min(prefix, e.tokens.size() - 1);
            std::size_t i = 0;
            while (i < prefix && e.tokens[i] == first.tokens[i] && e.targets[i] == -100) ++i;
            prefix = i;
        }
    }
    model::Batch batch;
    batch.shared_prefix = prefix;
    if (prefix > 0) {
        const auto& first = examples[order[0]];
        batch.tokens.assign(first.tokens.begin(), first.tokens.begin() + static_cast<std::ptrdiff_t>(prefix));
        batch.targets.assign(prefix, -100);
    }
    for (auto idx : order) {
        const auto& e = examples[idx];
        const auto skip = static_cast<std::ptrdiff_t>(prefix);
        batch.tokens.insert(batch.tokens.end(), e.tokens.begin() + skip, e.tokens.end());
        batch.targets.insert(batch.targets.end(), e.targets.begin() + skip, e.targets.end());
        batch.segments.push_back(e.tokens.size() - prefix);
    }
    return batch;
}

LoadResult load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read corpus file " + path.string());
    struct Raw {
        Example example;
        std::string category;
    };
    std::vector<Raw> raw;
    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto reject = [&](std::string reason) { result.rejected.push_back({line_no, std::move(reason)}); };
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            reject(std::string("invalid JSON: ") + e.what());
            continue;
        }
        if (!obj.is_object()) {
            reject("not a JSON object");
            continue;
        }
        auto text_field = [&](const char* key, bool required, std::string& into) {
            auto it = obj.find(key);
            if (it == obj.end() || it->is_null()) {
                if (required) reject(std::string("missing \"") + key + "\"");
                return !required;
            }
            if (!it->is_string()) {
                reject(std::string("\"") + key + "\" is not a string");
                return false;
            }
            into = it->get<std::string>();
            return true;
        };
        Raw r;
        r.category = "default";
        if (!text_field("instruction", true, r.example.instruction)) continue;
        if (!text_field("output", true, r.example.output)) continue;
        if (!text_field("input", false, r.example.input)) continue;
        if (!text_field("category", false, r.category)) continue;
        if (r.example.output.empty()) {
            reject("empty \"output\"");
            continue;
        }
        raw.push_back(std::move(r));
    }
    if (raw.empty()) {
        throw EmptyCorpusError("no valid examples in " + path.string() + " (" + std::to_string(result.rejected.size()) +
                               " rejected lines)");
    }
    std::set<std::string> names;
    for (const auto& r : raw) names.insert(r.category);
    result.corpus.label_names.assign(names.begin(), names.end());
    std::map<std::string, int> ids;
    for (std::size_t i = 0; i < result.corpus.label_names.size(); ++i) ids[result.corpus.label_names[i]] = static_cast<int>(i);
    for (auto& r : raw) {
        r.example.task_label = ids.at(r.category);
        result.corpus.examples.push_back(std::move(r.example));
    }
    return result;
}

void save_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write corpus file " + path.string());
    for (const auto& e : corpus.examples) {
        nlohmann::json obj;
        obj["instruction"] = e.instruction;
        obj["input"] = e.input;
        obj["output"] = e.output;
        obj["category"] = corpus.label_names.at(static_cast<std::size_t>(e.task_label));
        out << obj.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::string synth_task_name(int task) {
    static const char* fixed[] = {"copy", "reverse", "uppercase", "count"};
    if (task < 0) throw ConfigError("negative task id");
    if (task < 4) return fixed[task];
    return "shift" + std::to_string(task - 3);
}

namespace {

std::string join_letters(const std::vector<char>& letters) {
    std::string s;
    for (std::size_t i = 0; i < letters.size(); ++i) {
        if (i) s.push_back(' ');
        s.push_back(letters[i]);
    }
    return s;
}

Example synth_example(int task, num::RngStream& rng) {
    constexpr int kAlphabet = 8;  // a-h
    const std::size_t len = 3 + rng.below(4);
    std::vector<char> letters(len);
    for (auto& c : letters) c = static_cast<char>('a' + rng.below(kAlphabet));

    Example e;
    e.task_label = task;
    const std::string name = synth_task_name(task);
    e.instruction = name + ": " + join_letters(letters);
    std::vector<char> out = letters;
    switch (task) {
        case 0: break;
        case 1: std::reverse(out.begin(), out.end()); break;
        case 2:
            for (auto& c : out) c = static_cast<char>(c - 'a' + 'A');
            break;
        case 3: e.output = std::to_string(len); return e;
        default: {
            const int shift = (task - 3) % kAlphabet;
            for (auto& c : out) c = static_cast<char>('a' + (c - 'a' + shift) % kAlphabet);
        }
    }
    e.output = join_letters(out);
    return e;
}

}  // namespace

Corpus synth_tasks(int n_tasks, int per_task, std::uint64_t seed, std::string_view purpose) {
    if (n_tasks < 1) throw ConfigError("synth_tasks: n_tasks must be >= 1");
    if (per_task < 0) throw ConfigError("synth_tasks: per_task must be >= 0");
    Corpus corpus;
    for (int t = 0; t < n_tasks; ++t) {
        corpus.label_names.push_back(synth_task_name(t));
        num::RngStream rng(seed, "data", std::string(purpose) + "/" + synth_task_name(t));
        for (int i = 0; i < per_task; ++i) corpus.examples.push_back(synth_example(t, rng));
    }
    return corpus;
}

}  // namespace flexfed::data
