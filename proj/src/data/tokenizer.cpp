// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/data/tokenizer.hpp"

#include "flexfed/error.hpp"

namespace flexfed::data {

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
    return ids;
}

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size() + 2);
    ids.push_back(kBos);
    for (int id : encode_bytes(text)) ids.push_back(id);
    ids.push_back(kEos);
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string text;
    text.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= kVocabSize) throw DecodeError("token id " + std::to_string(id) + " is not in the vocabulary");
        if (id < 256) text.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return text;
}

}  // namespace flexfed::data
