// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams. Every stochastic decision in the framework
// draws from a stream addressed by (seed, module, purpose), so the value of
// draw #i never depends on which other streams were consumed before it.

#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <utility>

namespace flexfed::num {

/// 64-bit FNV-1a, used to turn stream names into keys.
std::uint64_t hash_name(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

class RngStream {
public:
    using result_type = std::uint64_t;

    RngStream(std::uint64_t seed, std::string_view module, std::string_view purpose);

    /// Child stream whose key is derived from this stream's key and `purpose`.
    /// Does not consume draws from the parent.
    [[nodiscard]] RngStream split(std::string_view purpose) const;

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal(double mean = 0.0, double stddev = 1.0);
    /// Gamma(shape, scale = 1).
    double gamma(double shape);
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    [[nodiscard]] std::uint64_t key() const { return key_; }
    [[nodiscard]] std::uint64_t counter() const { return counter_; }

private:
    explicit RngStream(std::uint64_t key) : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace flexfed::num
