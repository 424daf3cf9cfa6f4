// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/numerics/rng.hpp"

#include <boost/random/gamma_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>

namespace flexfed::num {

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

std::uint64_t hash_name(std::string_view text, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t mix64(std::uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::string_view module, std::string_view purpose)
    : key_(mix64(hash_name(purpose, hash_name(module, mix64(seed + kGolden))))) {}

RngStream RngStream::split(std::string_view purpose) const {
    return RngStream(mix64(hash_name(purpose, key_)));
}

RngStream::result_type RngStream::operator()() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double RngStream::normal(double mean, double stddev) {
    boost::random::normal_distribution<double> dist(mean, stddev);
    return dist(*this);
}

double RngStream::gamma(double shape) {
    boost::random::gamma_distribution<double> dist(shape, 1.0);
    return dist(*this);
}

std::uint64_t RngStream::below(std::uint64_t n) {
    boost::random::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
    return dist(*this);
}

}  // namespace flexfed::num
