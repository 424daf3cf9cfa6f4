// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flexfed/model/forward.hpp"

namespace flexfed::data {

struct Example {
    std::string instruction;
    std::string input;
    std::string output;
    int task_label = 0;
};

struct Corpus {
    std::vector<Example> examples;
    /// Category name of every label id.
    std::vector<std::string> label_names;

    [[nodiscard]] std::size_t size() const { return examples.size(); }
    [[nodiscard]] std::size_t n_labels() const { return label_names.size(); }
};

/// Instruction-tuning prompt up to and including "### Response: \n". A
/// nonempty input is appended to the instruction on its own line.
std::string render_alpaca_prompt(const Example& example);
/// Prompt followed by the response and its closing newline.
std::string render_alpaca_training_text(const Example& example);

/// Next-token training pair of one example: tokens[i] predicts targets[i].
/// Only response bytes, the closing newline and EOS carry loss.
struct EncodedExample {
    std::vector<int> tokens;
    std::vector<int> targets;
    /// Number of positions whose target is not ignored.
    std::size_t loss_tokens = 0;
};

/// Encodes [BOS] prompt response "\n" [EOS]. Sequences longer than
/// max_seq_len are cut at the end.
EncodedExample encode_example(const Example& example, std::size_t max_seq_len);

/// Packs encoded examples into one batch in the given order. With
/// share_prefix, the longest loss-free token prefix common to all of them is
/// stored once (see model::Batch); the loss is unchanged up to rounding.
model::Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> order,
                        bool share_prefix = false);

struct RejectedLine {
    std::size_t line = 0;
    std::string reason;
};

struct LoadResult {
    Corpus corpus;
    std::vector<RejectedLine> rejected;
};

/// Reads instruction/input/output/category JSON lines. Labels are assigned in
/// sorted category order; a missing category maps to "default".
/// Unreadable file -> IoError, no valid line -> EmptyCorpusError.
LoadResult load_jsonl(const std::filesystem::path& path);
void save_jsonl(const Corpus& corpus, const std::filesystem::path& path);

/// Names of the synthetic tasks: copy, reverse, uppercase, count, then
/// shift1, shift2, ...
std::string synth_task_name(int task);

/// Deterministic synthetic instruction tasks over the letters a-h.
Corpus synth_tasks(int n_tasks, int per_task, std::uint64_t seed, std::string_view purpose = "synth");

}  // namespace flexfed::data
