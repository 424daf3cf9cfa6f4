// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/numerics/kernels.hpp"

#include <vector>

namespace flexfed::num::kernels {

void gemm_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

void gemm_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] = acc;
        }
    }
}

void gemm_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < m; ++p) {
                acc += a[p * k + i] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

namespace {

// Row i of c accumulates a[i,p] * b[p,:] for p = 0..k-1 in order; the inner
// loop over j is the one that vectorizes.
inline void nn_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                   std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const double* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

}  // namespace

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n) {
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = c.data();
    const auto rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelThreshold)
    for (long i = 0; i < rows; ++i) {
        nn_row(ap + i * k, bp, cp + i * n, k, n);
    }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n) {
    // Transpose b once so the contiguous-row kernel applies.
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(a, bt, c, m, k, n);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n) {
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = c.data();
    const auto rows = static_cast<long>(k);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelThreshold)
    for (long i = 0; i < rows; ++i) {
        double* c_row = cp + i * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
        for (std::size_t p = 0; p < m; ++p) {
            const double av = ap[p * k + static_cast<std::size_t>(i)];
            const double* b_row = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

}  // namespace flexfed::num::kernels
