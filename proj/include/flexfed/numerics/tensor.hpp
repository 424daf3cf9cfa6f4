// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flexfed::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first written
    bool requires_grad = false;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};
}  // namespace detail

/// Dense row-major f64 array. Copies of a Tensor share storage (handle
/// semantics); use clone() for an independent value copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    /// Trainable leaf: requires_grad and a zeroed grad buffer.
    static Tensor parameter(Shape shape, std::vector<double> values);

    [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] std::size_t rank() const { return shape().size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const;
    [[nodiscard]] std::size_t numel() const;

    [[nodiscard]] std::span<const double> data() const;
    /// Direct write access; reserved for optimizers, loaders and tests.
    [[nodiscard]] std::span<double> mutable_data();
    [[nodiscard]] double at(std::size_t flat) const { return data()[flat]; }
    [[nodiscard]] double item() const;

    [[nodiscard]] bool requires_grad() const;
    void set_requires_grad(bool flag);
    [[nodiscard]] bool has_grad() const;
    /// Gradient (zeros if never written).
    [[nodiscard]] std::vector<double> grad() const;
    [[nodiscard]] std::span<double> mutable_grad();
    void zero_grad();

    /// Independent copy of the values; keeps requires_grad, drops grad.
    [[nodiscard]] Tensor clone() const;
    /// Copy of the values that never requires grad.
    [[nodiscard]] Tensor detach() const;

    [[nodiscard]] const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    void require_defined() const;
    friend Tensor make_tensor(Shape, std::vector<double>, bool);

    std::shared_ptr<detail::Node> node_;
};

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Throws NumericError naming `op` if any value is NaN or infinite.
void check_finite(std::span<const double> values, const char* op);

}  // namespace flexfed::num
