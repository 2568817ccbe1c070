#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "aq/tape.hpp"
#include "aq/tensor.hpp"

namespace aq {

/// Clamp applied inside logarithms and ratios of probabilities.
inline constexpr double kLogEps = 1e-12;

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Rows x classes view of a probability / logit tensor; last axis is the class axis.
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
    const std::size_t cols = t.shape().back();
    return {t.numel() / cols, cols};
}

inline double clamp_log(double v, Tape& tape) {
    if (v < kLogEps) {
        ++tape.eps_clamps;
        v = kLogEps;
    }
    return std::log(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// C[m x n] += A[m x k] * B[k x n], row-major. Each C entry accumulates in
/// increasing p order.
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict crow = c + i * n;
        const double* arow = a + i * k;
        std::size_t p = 0;
        for (; p + 4 <= k; p += 4) {
            const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const double* __restrict b0 = b + p * n;
            const double* __restrict b1 = b0 + n;
            const double* __restrict b2 = b1 + n;
            const double* __restrict b3 = b2 + n;
            for (std::size_t j = 0; j < n; ++j) {
                double v = crow[j];
                v += a0 * b0[j];
                v += a1 * b1[j];
                v += a2 * b2[j];
                v += a3 * b3[j];
                crow[j] = v;
            }
        }
        for (; p < k; ++p) {
            const double av = arow[p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    check_finite("matmul", out.data());
    auto ai = a.impl(), bi = b.impl();
    return tape.record("matmul", out, {&a, &b}, [ai, bi, m, k, n](std::span<const double> g) {
        if (auto* ga = grad_sink(ai)) {
            std::vector<double> bt(n * k);
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bi->data[p * n + j];
            detail::gemm_nn(g.data(), bt.data(), ga->data(), m, n, k);
        }
        if (auto* gb = grad_sink(bi)) {
            std::vector<double> at(k * m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) at[p * m + i] = ai->data[i * k + p];
            detail::gemm_nn(at.data(), g.data(), gb->data(), k, m, n);
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] + b[i];
    check_finite("add", out.data());
    auto ai = a.impl(), bi = b.impl();
    return tape.record("add", out, {&a, &b}, [ai, bi](std::span<const double> g) {
        if (auto* ga = grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] - b[i];
    check_finite("sub", out.data());
    auto ai = a.impl(), bi = b.impl();
    return tape.record("sub", out, {&a, &b}, [ai, bi](std::span<const double> g) {
        if (auto* ga = grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] * b[i];
    check_finite("mul", out.data());
    auto ai = a.impl(), bi = b.impl();
    return tape.record("mul", out, {&a, &b}, [ai, bi](std::span<const double> g) {
        if (auto* ga = grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bi->data[i];
        if (auto* gb = grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ai->data[i];
    });
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] * c;
    check_finite("scale", out.data());
    auto ai = a.impl();
    return tape.record("scale", out, {&a}, [ai, c](std::span<const double> g) {
        if (auto* ga = grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
    });
}

/// Adds a per-channel bias; channels are axis 1 of a rank-2 or rank-4 tensor.
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 || bias.numel() != x.dim(1)) {
        throw DimensionError("add_bias: bias of " + std::to_string(bias.numel()) + " for input " +
                             shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    Tensor out(x.shape());
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t q = 0; q < inner; ++q) {
                const std::size_t idx = (s * c + ch) * inner + q;
                out.data()[idx] = x[idx] + bias[ch];
            }
    check_finite("add_bias", out.data());
    auto xi = x.impl(), bi = bias.impl();
    return tape.record("add_bias", out, {&x, &bias}, [xi, bi, n, c, inner](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (auto* gb = grad_sink(bi))
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t q = 0; q < inner; ++q) (*gb)[ch] += g[(s * c + ch) * inner + q];
    });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = x[i] > 0.0 ? x[i] : 0.0;
    auto xi = x.impl();
    return tape.record("relu", out, {&x}, [xi](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xi->data[i] > 0.0) (*gx)[i] += g[i];
    });
}

inline Tensor tanh(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::tanh(x[i]);
    auto xi = x.impl(), oi = out.impl();
    return tape.record("tanh", out, {&x}, [xi, oi](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - oi->data[i] * oi->data[i]);
    });
}

inline Tensor exp(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::exp(x[i]);
    check_finite("exp", out.data());
    auto xi = x.impl(), oi = out.impl();
    return tape.record("exp", out, {&x}, [xi, oi](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * oi->data[i];
    });
}

/// Natural log with arguments below kLogEps clamped (and counted on the tape).
inline Tensor log(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    std::vector<double> arg(x.numel());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        arg[i] = std::max(x[i], kLogEps);
        out.data()[i] = detail::clamp_log(x[i], tape);
    }
    check_finite("log", out.data());
    auto xi = x.impl();
    return tape.record("log", out, {&x}, [xi, arg = std::move(arg)](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / arg[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

inline Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite("sum", out.data());
    auto xi = x.impl();
    return tape.record("sum", out, {&x}, [xi](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (double& v : *gx) v += g[0];
    });
}

inline Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), x.values());
    auto xi = x.impl();
    return tape.record("reshape", out, {&x}, [xi](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    });
}

/// N x (everything else).
inline Tensor flatten(Tape& tape, const Tensor& x) {
    return reshape(tape, x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// Probabilities and losses. The class axis is the last axis; losses average
// over rows.

inline Tensor softmax(Tape& tape, const Tensor& x) {
    auto [rows, cols] = detail::rows_cols(x);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &x.data()[r * cols];
        double* o = &out.data()[r * cols];
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
    }
    check_finite("softmax", out.data());
    auto xi = x.impl(), oi = out.impl();
    return tape.record("softmax", out, {&x}, [xi, oi, rows, cols](std::span<const double> g) {
        auto* gx = grad_sink(xi);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &oi->data[r * cols];
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[j];
            for (std::size_t j = 0; j < cols; ++j) (*gx)[r * cols + j] += y[j] * (g[r * cols + j] - dot);
        }
    });
}

inline Tensor log_softmax(Tape& tape, const Tensor& x) {
    auto [rows, cols] = detail::rows_cols(x);
    Tensor out(x.shape());
    std::vector<double> probs(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &x.data()[r * cols];
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(in[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < cols; ++j) {
            out.data()[r * cols + j] = in[j] - lz;
            probs[r * cols + j] = std::exp(in[j] - lz);
        }
    }
    check_finite("log_softmax", out.data());
    auto xi = x.impl();
    return tape.record("log_softmax", out, {&x},
                       [xi, rows, cols, probs = std::move(probs)](std::span<const double> g) {
                           auto* gx = grad_sink(xi);
                           if (!gx) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double gs = 0.0;
                               for (std::size_t j = 0; j < cols; ++j) gs += g[r * cols + j];
                               for (std::size_t j = 0; j < cols; ++j)
                                   (*gx)[r * cols + j] += g[r * cols + j] - probs[r * cols + j] * gs;
                           }
                       });
}

namespace detail {

inline void check_labels(const char* op, std::span<const int> labels, std::size_t rows, std::size_t cols) {
    if (labels.size() != rows) {
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= cols) {
            throw ContractError(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                                std::to_string(cols) + ")");
        }
    }
}

}  // namespace detail

/// Mean over rows of -log p[label]; `probs` rows are probability vectors.
inline Tensor cross_entropy(Tape& tape, const Tensor& probs, std::span<const int> labels) {
    auto [rows, cols] = detail::rows_cols(probs);
    detail::check_labels("cross_entropy", labels, rows, cols);
    double total = 0.0;
    std::vector<double> denom(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double p = probs[r * cols + static_cast<std::size_t>(labels[r])];
        denom[r] = std::max(p, kLogEps);
        total -= detail::clamp_log(p, tape);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    check_finite("cross_entropy", out.data());
    auto pi = probs.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    return tape.record("cross_entropy", out, {&probs},
                       [pi, rows, cols, lab = std::move(lab), denom = std::move(denom)](std::span<const double> g) {
                           auto* gp = grad_sink(pi);
                           if (!gp) return;
                           const double s = g[0] / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r)
                               (*gp)[r * cols + static_cast<std::size_t>(lab[r])] -= s / denom[r];
                       });
}

/// KL(p || q) = sum_i p_i log(p_i / q_i), averaged over rows. Terms with p_i = 0
/// contribute zero; q_i below kLogEps is clamped and counted.
inline Tensor kl_div(Tape& tape, const Tensor& p, const Tensor& q) {
    detail::require_same_shape("kl_div", p, q);
    auto [rows, cols] = detail::rows_cols(p);
    double total = 0.0;
    std::vector<double> qc(q.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
        qc[i] = q[i];
        if (p[i] <= 0.0) continue;
        if (q[i] < kLogEps) {
            ++tape.eps_clamps;
            qc[i] = kLogEps;
        }
        total += p[i] * (std::log(p[i]) - std::log(qc[i]));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    check_finite("kl_div", out.data());
    auto pi = p.impl(), qi = q.impl();
    return tape.record("kl_div", out, {&p, &q}, [pi, qi, rows, qc = std::move(qc)](std::span<const double> g) {
        const double s = g[0] / static_cast<double>(rows);
        if (auto* gp = grad_sink(pi))
            for (std::size_t i = 0; i < qc.size(); ++i)
                if (pi->data[i] > 0.0) (*gp)[i] += s * (std::log(pi->data[i]) - std::log(qc[i]) + 1.0);
        if (auto* gq = grad_sink(qi))
            for (std::size_t i = 0; i < qc.size(); ++i)
                if (pi->data[i] > 0.0) (*gq)[i] -= s * pi->data[i] / qc[i];
    });
}

/// Cross-entropy computed from logits through a stable log-softmax.
inline Tensor cross_entropy_logits(Tape& tape, const Tensor& logits, std::span<const int> labels) {
    auto [rows, cols] = detail::rows_cols(logits);
    detail::check_labels("cross_entropy_logits", labels, rows, cols);
    Tensor lsm = log_softmax(tape, logits);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total -= lsm[r * cols + static_cast<std::size_t>(labels[r])];
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    check_finite("cross_entropy_logits", out.data());
    auto li = lsm.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    return tape.record("nll", out, {&lsm}, [li, rows, cols, lab = std::move(lab)](std::span<const double> g) {
        auto* gl = grad_sink(li);
        if (!gl) return;
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) (*gl)[r * cols + static_cast<std::size_t>(lab[r])] -= s;
    });
}

/// KL(target || softmax(logits)) with `target` treated as a constant
/// distribution: no gradient ever reaches whatever produced it.
inline Tensor kl_div_logits(Tape& tape, const Tensor& target, const Tensor& logits) {
    detail::require_same_shape("kl_div_logits", target, logits);
    auto [rows, cols] = detail::rows_cols(logits);
    (void)cols;
    Tensor lsm = log_softmax(tape, logits);
    double total = 0.0;
    for (std::size_t i = 0; i < target.numel(); ++i) {
        if (target[i] <= 0.0) continue;
        total += target[i] * (std::log(target[i]) - lsm[i]);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    check_finite("kl_div_logits", out.data());
    auto li = lsm.impl();
    std::vector<double> t(target.values());
    return tape.record("kl_target", out, {&lsm}, [li, rows, t = std::move(t)](std::span<const double> g) {
        auto* gl = grad_sink(li);
        if (!gl) return;
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t i = 0; i < t.size(); ++i) (*gl)[i] -= s * t[i];
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW, cross-correlation)

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (k > in + 2 * pad) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                             shape_str(w.shape()));
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const std::size_t OH = conv_out_extent(H, KH, stride, padding);
    const std::size_t OW = conv_out_extent(W, KW, stride, padding);
    Tensor out(Shape{N, F, OH, OW});
    const auto X = x.data();
    const auto K = w.data();
    auto O = out.data();
    const auto ipad = static_cast<std::ptrdiff_t>(padding);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t kh = 0; kh < KH; ++kh) {
                            const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - ipad;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kw = 0; kw < KW; ++kw) {
                                const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - ipad;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += X[((n * C + c) * H + static_cast<std::size_t>(ih)) * W +
                                         static_cast<std::size_t>(iw)] *
                                       K[((f * C + c) * KH + kh) * KW + kw];
                            }
                        }
                    O[((n * F + f) * OH + oh) * OW + ow] = acc;
                }
    check_finite("conv2d", O);
    auto xi = x.impl(), wi = w.impl();
    return tape.record("conv2d", out, {&x, &w}, [=](std::span<const double> g) {
        auto* gx = grad_sink(xi);
        auto* gw = grad_sink(wi);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t oh = 0; oh < OH; ++oh)
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const double go = g[((n * F + f) * OH + oh) * OW + ow];
                        if (go == 0.0) continue;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - ipad;
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t kw = 0; kw < KW; ++kw) {
                                    const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - ipad;
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                    const std::size_t xidx = ((n * C + c) * H + static_cast<std::size_t>(ih)) * W +
                                                             static_cast<std::size_t>(iw);
                                    const std::size_t widx = ((f * C + c) * KH + kh) * KW + kw;
                                    if (gx) (*gx)[xidx] += go * wi->data[widx];
                                    if (gw) (*gw)[widx] += go * xi->data[xidx];
                                }
                            }
                    }
    });
}

inline Tensor max_pool2d(Tape& tape, const Tensor& x, std::size_t kernel, std::size_t stride) {
    if (x.rank() != 4) throw DimensionError("max_pool2d: expected NCHW input, got " + shape_str(x.shape()));
    if (kernel == 0 || stride == 0) throw DimensionError("max_pool2d: kernel and stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = conv_out_extent(H, kernel, stride, 0);
    const std::size_t OW = conv_out_extent(W, kernel, stride, 0);
    Tensor out(Shape{N, C, OH, OW});
    std::vector<std::size_t> argmax(out.numel());
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                std::size_t best = nc * H * W + (oh * stride) * W + ow * stride;
                for (std::size_t kh = 0; kh < kernel; ++kh)
                    for (std::size_t kw = 0; kw < kernel; ++kw) {
                        const std::size_t idx = nc * H * W + (oh * stride + kh) * W + ow * stride + kw;
                        if (x[idx] > x[best]) best = idx;
                    }
                const std::size_t o = (nc * OH + oh) * OW + ow;
                out.data()[o] = x[best];
                argmax[o] = best;
            }
    auto xi = x.impl();
    return tape.record("max_pool2d", out, {&x}, [xi, argmax = std::move(argmax)](std::span<const double> g) {
        if (auto* gx = grad_sink(xi))
            for (std::size_t o = 0; o < g.size(); ++o) (*gx)[argmax[o]] += g[o];
    });
}

}  // namespace aq
