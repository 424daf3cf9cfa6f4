// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/numerics/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "flexfed/error.hpp"
#include "flexfed/numerics/tape.hpp"

namespace flexfed::num {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

void check_finite(std::span<const double> values, const char* op) {
    // NaN and Inf are exactly the values whose exponent bits are all set.
    constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        bad |= static_cast<std::uint64_t>((bits & kExponent) == kExponent);
    }
    if (bad) throw NumericError(std::string("non-finite value produced by ") + op);
}

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->data.size(), 0.0);
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), false);
}

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value), false);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    check_finite(values, "Tensor::from");
    return make_tensor(std::move(shape), std::move(values), false);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    check_finite(values, "Tensor::parameter");
    return make_tensor(std::move(shape), std::move(values), true);
}

void Tensor::require_defined() const {
    if (!node_) throw LifecycleError("use of an undefined tensor");
}

const Shape& Tensor::shape() const {
    require_defined();
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    require_defined();
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    require_defined();
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    require_defined();
    node_->requires_grad = flag;
    if (flag && node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    require_defined();
    if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    require_defined();
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    return make_tensor(shape(), node_->data, node_->requires_grad);
}

Tensor Tensor::detach() const { return make_tensor(shape(), node_->data, false); }

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* t_current_tape = nullptr;
}

Tape* Tape::current() { return t_current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(t_current_tape) { t_current_tape = &tape; }

TapeScope::~TapeScope() { t_current_tape = previous_; }

void Tape::record(const char* op, const Tensor& output, BackwardFn fn) {
    if (consumed_) throw TapeError(std::string("cannot record ") + op + " on a consumed tape");
    entries_.push_back(Entry{op, output.node(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw TapeError("backward() called twice on the same tape; re-run the forward pass");
    if (!loss.defined() || loss.numel() != 1) {
        throw DimensionError("backward() needs a scalar loss");
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    // Intermediate nodes start from zero; leaves accumulate into their buffers.
    for (auto& e : entries_) {
        auto& g = e.output->grad;
        g.assign(e.output->data.size(), 0.0);
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->backward(it->output->grad);
        check_finite(it->output->grad, it->op);
    }
    // Release closures (and the activations they captured).
    entries_.clear();
}

}  // namespace flexfed::num
