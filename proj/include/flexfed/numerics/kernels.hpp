// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major GEMM kernels. Each entry point exists twice: a naive serial
// reference (kept for testing) and an OpenMP kernel used by the tensor ops.
// Both accumulate every output element over the shared dimension in
// ascending order starting from zero, so their results are bitwise equal.

#pragma once

#include <cstddef>
#include <span>

namespace flexfed::num::kernels {

// c[m,n]  = a[m,k] * b[k,n]
void gemm_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n);
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n);

// c[m,n]  = a[m,k] * b[n,k]^T
void gemm_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n);

// c[k,n]  = a[m,k]^T * b[m,n]
void gemm_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n);

/// Work (m*k*n) below which the OpenMP kernels stay on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

}  // namespace flexfed::num::kernels
