// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flexfed::eval {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Lowercased (ASCII) whitespace-separated tokens.
std::vector<std::string> rouge_tokens(std::string_view text);

/// Longest common subsequence length, O(|a|*|b|) time, O(|b|) memory.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// ROUGE-L with F_beta = (1 + beta^2) P R / (R + beta^2 P); beta = 1 is F1.
/// Both sides empty -> all ones; one side empty -> all zeros.
RougeScore rouge_l(std::string_view candidate, std::string_view reference, double beta = 1.0);

}  // namespace flexfed::eval
