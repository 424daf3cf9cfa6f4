// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flexfed::data {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocabSize = 259;

/// Byte ids of `text` without specials.
std::vector<int> encode_bytes(std::string_view text);
/// [BOS] + bytes + [EOS].
std::vector<int> tokenize(std::string_view text);
/// Bytes of the ids with specials dropped. Id outside [0, 259) -> DecodeError.
std::string detokenize(std::span<const int> ids);

}  // namespace flexfed::data
