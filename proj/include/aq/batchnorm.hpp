#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "aq/tape.hpp"
#include "aq/tensor.hpp"

namespace aq {

/// Affine parameters and running statistics of one batch-norm layer at one precision.
struct BnEntry {
    Tensor gamma;
    Tensor beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    std::size_t calib_batches = 0;  // batches folded in by BnMode::Collect since the last reset

    static BnEntry make(std::size_t channels, double momentum = 0.1) {
        BnEntry e;
        e.gamma = Tensor::ones(Shape{channels});
        e.gamma.set_requires_grad();
        e.beta = Tensor::zeros(Shape{channels});
        e.beta.set_requires_grad();
        e.running_mean.assign(channels, 0.0);
        e.running_var.assign(channels, 1.0);
        e.momentum = momentum;
        return e;
    }

    std::size_t channels() const { return running_mean.size(); }

    BnEntry deep_copy() const {
        BnEntry e = *this;
        e.gamma = gamma.clone();
        e.beta = beta.clone();
        return e;
    }

    void reset_stats() {
        std::fill(running_mean.begin(), running_mean.end(), 0.0);
        std::fill(running_var.begin(), running_var.end(), 1.0);
        calib_batches = 0;
    }
};

enum class BnMode {
    Train,    // batch statistics, momentum update of running stats
    Eval,     // running statistics
    Collect,  // batch statistics, running stats become the cumulative average over collected batches
};

/// Batch normalization over axis 1 of a rank-2 (N x C) or rank-4 (N x C x H x W) input.
/// `update_stats = false` normalizes in Train mode without touching the running statistics.
namespace detail {

// Calls f(c, i) for every element i of an [N, C, inner...] tensor, sample-major.
template <class F>
inline void bn_visit(std::size_t N, std::size_t C, std::size_t inner, F&& f) {
    if (inner == 1) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) f(c, n * C + c);
        return;
    }
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * inner;
            for (std::size_t q = 0; q < inner; ++q) f(c, base + q);
        }
}

}  // namespace detail

inline Tensor batchnorm(Tape& tape, const Tensor& x, BnEntry& entry, BnMode mode, bool update_stats = true) {
    if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != entry.channels()) {
        throw DimensionError("batchnorm: input " + shape_str(x.shape()) + " against " +
                             std::to_string(entry.channels()) + " channels");
    }
    const std::size_t N = x.dim(0), C = x.dim(1), inner = x.numel() / (N * C);
    const std::size_t M = N * inner;
    const double* X = x.data().data();

    std::vector<double> mu(C), inv_std(C);
    const bool batch_stats = mode != BnMode::Eval;
    if (batch_stats) {
        std::vector<double> sum(C, 0.0), sq(C, 0.0);
        double* S = sum.data();
        double* Q = sq.data();
        detail::bn_visit(N, C, inner, [&](std::size_t c, std::size_t i) { S[c] += X[i]; });
        for (std::size_t c = 0; c < C; ++c) S[c] /= static_cast<double>(M);
        detail::bn_visit(N, C, inner, [&](std::size_t c, std::size_t i) {
            const double d = X[i] - S[c];
            Q[c] += d * d;
        });
        for (std::size_t c = 0; c < C; ++c) {
            const double m = sum[c];
            const double v = sq[c] / static_cast<double>(M);
            mu[c] = m;
            inv_std[c] = 1.0 / std::sqrt(v + entry.eps);
            const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
            if (update_stats && mode == BnMode::Train) {
                entry.running_mean[c] = (1.0 - entry.momentum) * entry.running_mean[c] + entry.momentum * m;
                entry.running_var[c] = (1.0 - entry.momentum) * entry.running_var[c] + entry.momentum * unbiased;
            } else if (update_stats && mode == BnMode::Collect) {
                const double w = 1.0 / static_cast<double>(entry.calib_batches + 1);
                entry.running_mean[c] += w * (m - entry.running_mean[c]);
                entry.running_var[c] += w * (unbiased - entry.running_var[c]);
            }
        }
        if (update_stats && mode == BnMode::Collect) ++entry.calib_batches;
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = entry.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(std::max(entry.running_var[c], 0.0) + entry.eps);
        }
    }

    Tensor out(x.shape());
    std::vector<double> xhat(x.numel());
    {
        double* O = out.data().data();
        double* H = xhat.data();
        const double* G = entry.gamma.data().data();
        const double* Bt = entry.beta.data().data();
        const double* MU = mu.data();
        const double* IS = inv_std.data();
        detail::bn_visit(N, C, inner, [&](std::size_t c, std::size_t i) {
            const double h = (X[i] - MU[c]) * IS[c];
            H[i] = h;
            O[i] = G[c] * h + Bt[c];
        });
    }
    check_finite("batchnorm", out.data());

    auto xi = x.impl(), gi = entry.gamma.impl(), bi = entry.beta.impl();
    return tape.record(
        "batchnorm", out, {&x, &entry.gamma, &entry.beta},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
            auto* gx = grad_sink(xi);
            auto* gg = grad_sink(gi);
            auto* gb = grad_sink(bi);
            std::vector<double> sg(C, 0.0), sgx(C, 0.0);
            double* SG = sg.data();
            double* SGX = sgx.data();
            const double* H = xhat.data();
            const double* Gr = g.data();
            detail::bn_visit(N, C, inner, [&](std::size_t c, std::size_t i) {
                SG[c] += Gr[i];
                SGX[c] += Gr[i] * H[i];
            });
            for (std::size_t c = 0; c < C; ++c) {
                if (gg) (*gg)[c] += sgx[c];
                if (gb) (*gb)[c] += sg[c];
            }
            if (!gx) return;
            const double invM = 1.0 / static_cast<double>(M);
            std::vector<double> k(C), s1(C), s2(C);
            for (std::size_t c = 0; c < C; ++c) {
                k[c] = gi->data[c] * inv_std[c];
                s1[c] = batch_stats ? invM * sg[c] : 0.0;
                s2[c] = batch_stats ? invM * sgx[c] : 0.0;
            }
            double* GX = gx->data();
            const double *K = k.data(), *S1 = s1.data(), *S2 = s2.data();
            detail::bn_visit(N, C, inner, [&](std::size_t c, std::size_t i) {
                GX[i] += K[c] * (Gr[i] - S1[c] - H[i] * S2[c]);
            });
        });
}

}  // namespace aq
