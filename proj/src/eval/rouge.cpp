// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/eval/rouge.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace flexfed::eval {

std::vector<std::string> rouge_tokens(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream in(lower);
    std::vector<std::string> tokens;
    for (std::string tok; in >> tok;) tokens.push_back(std::move(tok));
    return tokens;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> row(b.size() + 1, 0);
    for (const auto& x : a) {
        std::size_t diag = 0;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = x == b[j - 1] ? diag + 1 : std::max(up, row[j - 1]);
            diag = up;
        }
    }
    return row[b.size()];
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference, double beta) {
    const auto cand = rouge_tokens(candidate);
    const auto ref = rouge_tokens(reference);
    if (cand.empty() && ref.empty()) return {1.0, 1.0, 1.0};
    if (cand.empty() || ref.empty()) return {};
    const auto l = static_cast<double>(lcs_length(cand, ref));
    if (l == 0.0) return {};
    RougeScore s;
    s.precision = l / static_cast<double>(cand.size());
    s.recall = l / static_cast<double>(ref.size());
    const double b2 = beta * beta;
    s.f1 = (1.0 + b2) * s.precision * s.recall / (s.recall + b2 * s.precision);
    return s;
}

}  // namespace flexfed::eval
