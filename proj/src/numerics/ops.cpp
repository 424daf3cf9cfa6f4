// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "flexfed/error.hpp"
#include "flexfed/numerics/kernels.hpp"
#include "flexfed/numerics/tape.hpp"

namespace flexfed::num {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

// Returns the active tape when at least one input needs a gradient.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = Tape::current();
    if (!tape) return nullptr;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return tape;
    }
    return nullptr;
}

Tensor finish(const char* op, Shape shape, std::vector<double> values, Tape* tape) {
    check_finite(values, op);
    return make_tensor(std::move(shape), std::move(values), tape != nullptr);
}

void accumulate(const NodePtr& node, std::span<const double> g) {
    auto& buf = node->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Activation parse_activation(std::string_view name) {
    if (name == "sigmoid") return Activation::Sigmoid;
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    if (name == "silu") return Activation::Silu;
    if (name == "gelu") return Activation::Gelu;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) {
    switch (kind) {
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Silu: return "silu";
        case Activation::Gelu: return "gelu";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    kernels::gemm_nn(a.data(), b.data(), out, m, k, n);
    Tape* tape = recording_tape({&a, &b});
    Tensor result = finish("matmul", {m, n}, std::move(out), tape);
    if (tape) {
        tape->record("matmul", result, [an = a.node(), bn = b.node(), m, k, n](const std::vector<double>& g) {
            if (an->requires_grad) {
                std::vector<double> da(m * k);
                kernels::gemm_nt(g, bn->data, da, m, n, k);
                accumulate(an, da);
            }
            if (bn->requires_grad) {
                std::vector<double> db(k * n);
                kernels::gemm_tn(an->data, g, db, m, k, n);
                accumulate(bn, db);
            }
        });
    }
    return result;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_bt");
    require_rank(b, 2, "matmul_bt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_bt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    kernels::gemm_nt(a.data(), b.data(), out, m, k, n);
    Tape* tape = recording_tape({&a, &b});
    Tensor result = finish("matmul_bt", {m, n}, std::move(out), tape);
    if (tape) {
        tape->record("matmul_bt", result, [an = a.node(), bn = b.node(), m, k, n](const std::vector<double>& g) {
            if (an->requires_grad) {
                std::vector<double> da(m * k);
                kernels::gemm_nn(g, bn->data, da, m, n, k);
                accumulate(an, da);
            }
            if (bn->requires_grad) {
                std::vector<double> db(n * k);
                kernels::gemm_tn(g, an->data, db, m, n, k);
                accumulate(bn, db);
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    Tape* tape = recording_tape({&a, &b});
    Tensor result = finish("add", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("add", result, [an = a.node(), bn = b.node()](const std::vector<double>& g) {
            if (an->requires_grad) accumulate(an, g);
            if (bn->requires_grad) accumulate(bn, g);
        });
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    Tape* tape = recording_tape({&a, &b});
    Tensor result = finish("sub", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("sub", result, [an = a.node(), bn = b.node()](const std::vector<double>& g) {
            if (an->requires_grad) accumulate(an, g);
            if (bn->requires_grad) {
                auto& buf = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] -= g[i];
            }
        });
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    Tape* tape = recording_tape({&a, &b});
    Tensor result = finish("mul", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("mul", result, [an = a.node(), bn = b.node()](const std::vector<double>& g) {
            if (an->requires_grad) {
                auto& buf = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& buf = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * an->data[i];
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
    Tape* tape = recording_tape({&a});
    Tensor result = finish("scale", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("scale", result, [an = a.node(), factor](const std::vector<double>& g) {
            auto& buf = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * factor;
        });
    }
    return result;
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    require_rank(a, 2, "add_row");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (bias.numel() != cols) {
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match " +
                             shape_str(a.shape()));
    }
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = ad[r * cols + c] + bd[c];
    Tape* tape = recording_tape({&a, &bias});
    Tensor result = finish("add_row", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("add_row", result, [an = a.node(), bn = bias.node(), rows, cols](const std::vector<double>& g) {
            if (an->requires_grad) accumulate(an, g);
            if (bn->requires_grad) {
                auto& buf = bn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) buf[c] += g[r * cols + c];
            }
        });
    }
    return result;
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
    require_rank(a, 2, "scale_rows");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (w.numel() != rows) {
        throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " do not match " +
                             shape_str(a.shape()));
    }
    std::vector<double> out(a.numel());
    auto ad = a.data(), wd = w.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = ad[r * cols + c] * wd[r];
    Tape* tape = recording_tape({&a, &w});
    Tensor result = finish("scale_rows", a.shape(), std::move(out), tape);
    if (tape) {
        tape->record("scale_rows", result, [an = a.node(), wn = w.node(), rows, cols](const std::vector<double>& g) {
            if (an->requires_grad) {
                auto& buf = an->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) buf[r * cols + c] += g[r * cols + c] * wn->data[r];
            }
            if (wn->requires_grad) {
                auto& buf = wn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * an->data[r * cols + c];
                    buf[r] += acc;
                }
            }
        });
    }
    return result;
}

Tensor activation(Activation kind, const Tensor& x) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    switch (kind) {
        case Activation::Sigmoid:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(xd[i]);
            break;
        case Activation::Relu:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
            break;
        case Activation::Tanh:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
            break;
        case Activation::Silu:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * sigmoid(xd[i]);
            break;
        case Activation::Gelu:
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] / std::numbers::sqrt2));
            break;
    }
    Tape* tape = recording_tape({&x});
    Tensor result = finish("activation", x.shape(), std::move(out), tape);
    if (tape) {
        tape->record("activation", result, [xn = x.node(), yn = result.node(), kind](const std::vector<double>& g) {
            auto& buf = xn->grad_buffer();
            const auto& xv = xn->data;
            const auto& yv = yn->data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d = 0.0;
                switch (kind) {
                    case Activation::Sigmoid: d = yv[i] * (1.0 - yv[i]); break;
                    case Activation::Relu: d = xv[i] > 0.0 ? 1.0 : 0.0; break;
                    case Activation::Tanh: d = 1.0 - yv[i] * yv[i]; break;
                    case Activation::Silu: {
                        const double s = sigmoid(xv[i]);
                        d = s * (1.0 + xv[i] * (1.0 - s));
                        break;
                    }
                    case Activation::Gelu: {
                        const double cdf = 0.5 * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
                        const double pdf = std::exp(-0.5 * xv[i] * xv[i]) / std::sqrt(2.0 * std::numbers::pi);
                        d = cdf + xv[i] * pdf;
                        break;
                    }
                }
                buf[i] += g[i] * d;
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto& shape = x.shape();
    if (axis >= shape.size()) throw DimensionError("softmax: axis out of range for " + shape_str(shape));
    const std::size_t n = shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = xd[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(xd[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
        }
    }
    Tape* tape = recording_tape({&x});
    Tensor result = finish("softmax", shape, std::move(out), tape);
    if (tape) {
        tape->record("softmax", result, [xn = x.node(), yn = result.node(), outer, inner, n](const std::vector<double>& g) {
            auto& buf = xn->grad_buffer();
            const auto& y = yn->data;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        buf[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, double eps) {
    require_rank(x, 2, "layer_norm");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gain.numel() != cols) throw DimensionError("layer_norm: gain does not match " + shape_str(x.shape()));
    const auto xd = x.data();
    const auto gd = gain.data();
    std::vector<double> xhat(xd.size());
    std::vector<double> rstd(rows);
    std::vector<double> out(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += row[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<double>(cols);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[r * cols + c] = (row[c] - mu) * rstd[r];
            out[r * cols + c] = xhat[r * cols + c] * gd[c];
        }
    }
    Tape* tape = recording_tape({&x, &gain});
    Tensor result = finish("layer_norm", x.shape(), std::move(out), tape);
    if (tape) {
        tape->record("layer_norm", result,
                     [xn = x.node(), gn = gain.node(), xhat = std::move(xhat), rstd = std::move(rstd), rows,
                      cols](const std::vector<double>& g) {
                         const auto& gv = gn->data;
                         if (xn->requires_grad) {
                             auto& buf = xn->grad_buffer();
                             for (std::size_t r = 0; r < rows; ++r) {
                                 double m1 = 0.0, m2 = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) {
                                     const double dxh = g[r * cols + c] * gv[c];
                                     m1 += dxh;
                                     m2 += dxh * xhat[r * cols + c];
                                 }
                                 m1 /= static_cast<double>(cols);
                                 m2 /= static_cast<double>(cols);
                                 for (std::size_t c = 0; c < cols; ++c) {
                                     const double dxh = g[r * cols + c] * gv[c];
                                     buf[r * cols + c] += rstd[r] * (dxh - m1 - xhat[r * cols + c] * m2);
                                 }
                             }
                         }
                         if (gn->requires_grad) {
                             auto& buf = gn->grad_buffer();
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < cols; ++c) buf[c] += g[r * cols + c] * xhat[r * cols + c];
                         }
                     });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Indexing

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0);
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(table, rows);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_rank(x, 2, "gather_rows");
    const std::size_t total = x.dim(0), cols = x.dim(1);
    if (rows.empty()) throw DimensionError("gather_rows: empty row list");
    const auto xd = x.data();
    std::vector<double> out(rows.size() * cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= total) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(xd.data() + rows[i] * cols, cols, out.data() + i * cols);
    }
    Tape* tape = recording_tape({&x});
    Tensor result = finish("gather_rows", {rows.size(), cols}, std::move(out), tape);
    if (tape) {
        tape->record("gather_rows", result,
                     [xn = x.node(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), cols](const std::vector<double>& g) {
                         auto& buf = xn->grad_buffer();
                         for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < cols; ++c) buf[idx[i] * cols + c] += g[i * cols + c];
                     });
    }
    return result;
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> rows, std::size_t total_rows) {
    require_rank(x, 2, "scatter_add_rows");
    const std::size_t cols = x.dim(1);
    if (rows.size() != x.dim(0)) throw DimensionError("scatter_add_rows: row list does not match input");
    const auto xd = x.data();
    std::vector<double> out(total_rows * cols, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= total_rows) throw DimensionError("scatter_add_rows: row index out of range");
        for (std::size_t c = 0; c < cols; ++c) out[rows[i] * cols + c] += xd[i * cols + c];
    }
    Tape* tape = recording_tape({&x});
    Tensor result = finish("scatter_add_rows", {total_rows, cols}, std::move(out), tape);
    if (tape) {
        tape->record("scatter_add_rows", result,
                     [xn = x.node(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), cols](const std::vector<double>& g) {
                         auto& buf = xn->grad_buffer();
                         for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < cols; ++c) buf[i * cols + c] += g[idx[i] * cols + c];
                     });
    }
    return result;
}

Tensor take_column(const Tensor& x, std::span<const std::size_t> rows, std::size_t col) {
    require_rank(x, 2, "take_column");
    const std::size_t total = x.dim(0), cols = x.dim(1);
    if (col >= cols) throw DimensionError("take_column: column out of range");
    if (rows.empty()) throw DimensionError("take_column: empty row list");
    const auto xd = x.data();
    std::vector<double> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= total) throw DimensionError("take_column: row index out of range");
        out[i] = xd[rows[i] * cols + col];
    }
    Tape* tape = recording_tape({&x});
    Tensor result = finish("take_column", {rows.size()}, std::move(out), tape);
    if (tape) {
        tape->record("take_column", result,
                     [xn = x.node(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), cols, col](const std::vector<double>& g) {
                         auto& buf = xn->grad_buffer();
                         for (std::size_t i = 0; i < idx.size(); ++i) buf[idx[i] * cols + col] += g[i];
                     });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Top-k gating

std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
    if (k == 0 || k > row.size()) {
        throw ConfigError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(row.size()) + "]");
    }
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    order.resize(k);
    return order;
}

Tensor topk_gate(const Tensor& s, std::size_t k, bool renormalize) {
    if (s.rank() == 0) throw DimensionError("topk_gate: scalar input");
    const std::size_t n = s.shape().back();
    if (k == 0 || k > n) {
        throw ConfigError("topk_gate: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    const std::size_t rows = s.numel() / n;
    const auto sd = s.data();
    std::vector<double> out(sd.size(), 0.0);
    std::vector<unsigned char> mask(sd.size(), 0);
    std::vector<double> sums(rows, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = sd.subspan(r * n, n);
        const auto top = topk_indices(row, k);
        double total = 0.0;
        for (auto i : top) {
            mask[r * n + i] = 1;
            total += row[i];
        }
        if (renormalize) sums[r] = total;
        for (auto i : top) out[r * n + i] = renormalize ? row[i] / total : row[i];
    }
    Tape* tape = recording_tape({&s});
    Tensor result = finish("topk_gate", s.shape(), std::move(out), tape);
    if (tape) {
        tape->record("topk_gate", result,
                     [sn = s.node(), yn = result.node(), mask = std::move(mask), sums = std::move(sums), rows, n,
                      renormalize](const std::vector<double>& g) {
                         auto& buf = sn->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             if (renormalize) {
                                 for (std::size_t j = 0; j < n; ++j)
                                     if (mask[r * n + j]) dot += g[r * n + j] * yn->data[r * n + j];
                             }
                             for (std::size_t j = 0; j < n; ++j) {
                                 const std::size_t idx = r * n + j;
                                 if (!mask[idx]) continue;
                                 buf[idx] += renormalize ? (g[idx] - dot) / sums[r] : g[idx];
                             }
                         }
                     });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Attention

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::span<const std::size_t> segments, std::size_t shared_prefix) {
    require_rank(q, 2, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t total = q.dim(0), width = q.dim(1);
    if (n_heads == 0 || width % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(width) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    }
    if (shared_prefix + std::accumulate(segments.begin(), segments.end(), std::size_t{0}) != total) {
        throw DimensionError("causal_attention: segment lengths do not sum to the token count");
    }
    const std::size_t hd = width / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto qd = q.data(), kd = k.data(), vd = v.data();

    // Row r attends to keys [0, pre[r]) followed by [start[r], r]. Prefix rows
    // have pre = 0; suffix rows see the whole shared prefix.
    std::vector<std::size_t> pre(total), start(total), row_off(total + 1, 0);
    for (std::size_t r = 0; r < shared_prefix; ++r) {
        pre[r] = 0;
        start[r] = 0;
    }
    std::size_t offset = shared_prefix;
    for (std::size_t len : segments) {
        for (std::size_t r = offset; r < offset + len; ++r) {
            pre[r] = shared_prefix;
            start[r] = offset;
        }
        offset += len;
    }
    for (std::size_t r = 0; r < total; ++r) row_off[r + 1] = row_off[r] + pre[r] + (r - start[r] + 1);
    const std::size_t pairs = row_off[total];

    auto key_at = [&](std::size_t r, std::size_t j) { return j < pre[r] ? j : start[r] + (j - pre[r]); };

    // probs[h * pairs + row_off[r] + j] is the weight of row r on its j-th key.
    std::vector<double> probs(n_heads * pairs);
    std::vector<double> out(total * width, 0.0);
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t r = 0; r < total; ++r) {
            const std::size_t n = row_off[r + 1] - row_off[r];
            double* prow = probs.data() + h * pairs + row_off[r];
            const double* qi = qd.data() + r * width + h * hd;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                const double* kj = kd.data() + key_at(r, j) * width + h * hd;
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                prow[j] = dot * inv_sqrt;
                mx = std::max(mx, prow[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                z += prow[j];
            }
            const double inv_z = 1.0 / z;
            double* oi = out.data() + r * width + h * hd;
            for (std::size_t j = 0; j < n; ++j) {
                prow[j] *= inv_z;
                const double* vj = vd.data() + key_at(r, j) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) oi[c] += prow[j] * vj[c];
            }
        }
    }

    Tape* tape = recording_tape({&q, &k, &v});
    Tensor result = finish("causal_attention", q.shape(), std::move(out), tape);
    if (tape) {
        tape->record("causal_attention", result,
                     [qn = q.node(), kn = k.node(), vn = v.node(), probs = std::move(probs), pre = std::move(pre),
                      start = std::move(start), row_off = std::move(row_off), pairs, total, n_heads, hd, width,
                      inv_sqrt](const std::vector<double>& g) {
                         std::vector<double> dq(qn->data.size(), 0.0), dk(dq.size(), 0.0), dv(dq.size(), 0.0);
                         const auto& qv = qn->data;
                         const auto& kv = kn->data;
                         const auto& vv = vn->data;
                         auto key_at = [&](std::size_t r, std::size_t j) {
                             return j < pre[r] ? j : start[r] + (j - pre[r]);
                         };
                         std::vector<double> dp;
                         for (std::size_t h = 0; h < n_heads; ++h) {
                             for (std::size_t r = 0; r < total; ++r) {
                                 const std::size_t n = row_off[r + 1] - row_off[r];
                                 const double* prow = probs.data() + h * pairs + row_off[r];
                                 const double* gi = g.data() + r * width + h * hd;
                                 dp.assign(n, 0.0);
                                 double rowdot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     const std::size_t key = key_at(r, j);
                                     const double* vj = vv.data() + key * width + h * hd;
                                     double* dvj = dv.data() + key * width + h * hd;
                                     double acc = 0.0;
                                     for (std::size_t c = 0; c < hd; ++c) {
                                         acc += gi[c] * vj[c];
                                         dvj[c] += prow[j] * gi[c];
                                     }
                                     dp[j] = acc;
                                     rowdot += acc * prow[j];
                                 }
                                 const double* qi = qv.data() + r * width + h * hd;
                                 double* dqi = dq.data() + r * width + h * hd;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     const double ds = prow[j] * (dp[j] - rowdot) * inv_sqrt;
                                     const std::size_t key = key_at(r, j);
                                     const double* kj = kv.data() + key * width + h * hd;
                                     double* dkj = dk.data() + key * width + h * hd;
                                     for (std::size_t c = 0; c < hd; ++c) {
                                         dqi[c] += ds * kj[c];
                                         dkj[c] += ds * qi[c];
                                     }
                                 }
                             }
                         }
                         if (qn->requires_grad) accumulate(qn, dq);
                         if (kn->requires_grad) accumulate(kn, dk);
                         if (vn->requires_grad) accumulate(vn, dv);
                     });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Losses and reductions

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows) throw DimensionError("cross_entropy: target count does not match logits rows");
    const auto ld = logits.data();
    std::size_t count = 0;
    double total = 0.0;
    std::vector<double> lse(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw InputError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
        }
        const double* row = ld.data() + r * vocab;
        double mx = row[0];
        for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
        lse[r] = mx + std::log(z);
        total += lse[r] - row[t];
        ++count;
    }
    if (count == 0) throw DegenerateBatchError("cross_entropy: every position is ignored");
    Tape* tape = recording_tape({&logits});
    Tensor result = finish("cross_entropy", {1}, {total / static_cast<double>(count)}, tape);
    if (tape) {
        tape->record("cross_entropy", result,
                     [ln = logits.node(), tg = std::vector<int>(targets.begin(), targets.end()), lse = std::move(lse),
                      rows, vocab, count, ignore_index](const std::vector<double>& g) {
                         auto& buf = ln->grad_buffer();
                         const double w = g[0] / static_cast<double>(count);
                         for (std::size_t r = 0; r < rows; ++r) {
                             if (tg[r] == ignore_index) continue;
                             const double* row = ln->data.data() + r * vocab;
                             for (std::size_t c = 0; c < vocab; ++c) buf[r * vocab + c] += w * std::exp(row[c] - lse[r]);
                             buf[r * vocab + static_cast<std::size_t>(tg[r])] -= w;
                         }
                     });
    }
    return result;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tape* tape = recording_tape({&x});
    Tensor result = finish("sum", {1}, {total}, tape);
    if (tape) {
        tape->record("sum", result, [xn = x.node()](const std::vector<double>& g) {
            auto& buf = xn->grad_buffer();
            for (auto& b : buf) b += g[0];
        });
    }
    return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

}  // namespace flexfed::num
