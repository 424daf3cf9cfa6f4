// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape. Ops executed while a TapeScope is active, and having at
// least one input that requires grad, append an entry; backward() replays the
// entries in reverse. The tape is single-use: a second backward() throws,
// because intermediate gradients were already consumed. Double backward is
// not supported.

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "flexfed/numerics/tensor.hpp"

namespace flexfed::num {

class Tape {
public:
    /// Receives the gradient of the op output; accumulates into input grads.
    using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const char* op, const Tensor& output, BackwardFn fn);
    void backward(const Tensor& loss);

    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] bool consumed() const { return consumed_; }

    /// Tape of the active TapeScope on this thread, or nullptr.
    static Tape* current();

private:
    friend class TapeScope;

    struct Entry {
        const char* op;
        std::shared_ptr<detail::Node> output;
        BackwardFn backward;
    };
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

/// Makes `tape` the recording target for the current thread while alive.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

}  // namespace flexfed::num
