// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops. Every op validates shapes (DimensionError),
// rejects non-finite results (NumericError naming the op) and, when a tape is
// active and an input requires grad, records its local gradient.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "flexfed/numerics/tensor.hpp"

namespace flexfed::num {

enum class Activation { Sigmoid, Relu, Tanh, Silu, Gelu };

/// Parses "sigmoid" | "relu" | "tanh" | "silu" | "gelu"; ConfigError otherwise.
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

/// c[m,n] = a[m,k] b[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// c[m,n] = a[m,k] b[n,k]^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a[T,n] + bias[n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
/// Row i of a[T,n] multiplied by w[i]; w has T elements.
Tensor scale_rows(const Tensor& a, const Tensor& w);

Tensor activation(Activation kind, const Tensor& x);
/// Softmax along `axis`, max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Row-wise layer normalization of x[T,n] with gain[n] (no bias).
Tensor layer_norm(const Tensor& x, const Tensor& gain, double eps = 1e-5);

/// Rows of table[V,d] selected by ids. Out-of-range id -> InputError.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// out[T,n] with out[rows[i]] += x[i]; repeated rows accumulate.
Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> rows, std::size_t total_rows);
/// Values x[rows[i], col] as a rank-1 tensor.
Tensor take_column(const Tensor& x, std::span<const std::size_t> rows, std::size_t col);

/// Indices of the k largest entries of a length-n row, ties to the lower
/// index, ordered by (value desc, index asc).
std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k);
/// Keeps the top-k entries of every last-axis row of s and zeroes the rest.
/// With renormalize the survivors are divided by their sum.
Tensor topk_gate(const Tensor& s, std::size_t k, bool renormalize = false);

/// Multi-head causal self-attention over packed sequences. q, k, v are
/// [T,d]; `segments` lists the sequence lengths (summing to T); attention
/// never crosses a segment boundary. With shared_prefix > 0 the first
/// shared_prefix rows are a prefix common to every sequence, stored once:
/// they attend causally among themselves, and every segment attends to the
/// whole prefix before its own rows.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::span<const std::size_t> segments, std::size_t shared_prefix = 0);

/// Mean token NLL of logits[T,V] over positions whose target differs from
/// ignore_index. All positions ignored -> DegenerateBatchError.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -100);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace flexfed::num
