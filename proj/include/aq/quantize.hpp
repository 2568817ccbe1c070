#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "aq/tape.hpp"
#include "aq/tensor.hpp"

namespace aq {

inline constexpr int kMinBits = 1;
inline constexpr int kMaxBits = 16;
inline constexpr double kAlphaFloor = 1e-3;

/// Called with a short message whenever a quantizer repairs its input
/// (all-zero weight tensor, non-positive clip). Defaults to stderr.
inline std::function<void(const std::string&)>& quant_warning_sink() {
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::cerr << "warning: " << msg << '\n';
    };
    return sink;
}

inline void check_bits(int b) {
    if (b < kMinBits || b > kMaxBits) {
        throw ConfigError("bit-width " + std::to_string(b) + " outside [" + std::to_string(kMinBits) + ", " +
                          std::to_string(kMaxBits) + "]");
    }
}

inline std::uint32_t max_code(int b) { return (std::uint32_t{1} << b) - 1u; }

/// round((2^b - 1) x) / (2^b - 1) for x in [0, 1]. std::round rounds halves away
/// from zero, which fixes the tie rule.
inline double quantize_levels(double x, int b) {
    check_bits(b);
    constexpr double slack = 1e-9;
    if (!(x >= -slack && x <= 1.0 + slack)) {
        throw ContractError("quantize_levels: input " + std::to_string(x) + " outside [0, 1]");
    }
    x = std::clamp(x, 0.0, 1.0);
    const double n = static_cast<double>(max_code(b));
    return std::round(n * x) / n;
}

/// Integer codes of one weight tensor at the highest bit-width, plus the mean of
/// their dequantized values. Every lower precision is derived from this view.
struct QuantizedWeightView {
    Shape shape;
    std::vector<std::uint32_t> codes;
    int b1 = 8;
    double mean_b1 = 0.0;
};

/// Code k at bit-width b maps to 2k/(2^b - 1) - 1, in [-1, 1].
inline std::vector<double> dequantize(std::span<const std::uint32_t> codes, int b) {
    check_bits(b);
    const double n = static_cast<double>(max_code(b));
    std::vector<double> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) out[i] = 2.0 * static_cast<double>(codes[i]) / n - 1.0;
    return out;
}

inline double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// DoReFa weight quantization: tanh, normalize by max |tanh| into [0, 1], round
/// to 2^b1 levels. An all-zero tensor maps to the middle code.
inline QuantizedWeightView quantize_weights_dorefa(std::span<const double> weights, const Shape& shape, int b1) {
    check_bits(b1);
    if (shape_numel(shape) != weights.size()) {
        throw DimensionError("quantize_weights_dorefa: shape " + shape_str(shape) + " vs " +
                             std::to_string(weights.size()) + " values");
    }
    QuantizedWeightView view;
    view.shape = shape;
    view.b1 = b1;
    view.codes.resize(weights.size());
    const double n = static_cast<double>(max_code(b1));

    double max_abs = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w)) throw NumericError("quantize_weights_dorefa: non-finite weight");
        max_abs = std::max(max_abs, std::abs(std::tanh(w)));
    }
    if (max_abs == 0.0) {
        const auto mid = static_cast<std::uint32_t>(std::round(n / 2.0));
        std::fill(view.codes.begin(), view.codes.end(), mid);
        quant_warning_sink()("all-zero weight tensor quantized to the middle level");
    } else {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            const double u = std::tanh(weights[i]) / (2.0 * max_abs) + 0.5;
            view.codes[i] = static_cast<std::uint32_t>(std::round(n * std::clamp(u, 0.0, 1.0)));
        }
    }
    view.mean_b1 = mean_of(dequantize(view.codes, b1));
    return view;
}

inline QuantizedWeightView quantize_weights_dorefa(const Tensor& w, int b1) {
    return quantize_weights_dorefa(w.data(), w.shape(), b1);
}

/// Drops the b1 - b least significant bits of every code.
inline std::vector<std::uint32_t> truncate_codes(std::span<const std::uint32_t> codes, int b1, int b) {
    check_bits(b);
    check_bits(b1);
    if (b > b1) {
        throw ConfigError("truncate_codes: target " + std::to_string(b) + " bits exceeds stored " +
                          std::to_string(b1) + " bits");
    }
    std::vector<std::uint32_t> out(codes.begin(), codes.end());
    const int shift = b1 - b;
    for (auto& c : out) c >>= shift;
    return out;
}

inline std::vector<std::uint32_t> truncate_codes(const QuantizedWeightView& view, int b) {
    return truncate_codes(view.codes, view.b1, b);
}

/// Additive shift so the output mean equals `mean_ref`.
inline std::vector<double> mean_align(std::span<const double> values, double mean_ref) {
    const double shift = mean_ref - mean_of(values);
    std::vector<double> out(values.begin(), values.end());
    for (double& v : out) v += shift;
    return out;
}

/// Dequantized, mean-aligned weights at `b` derived from a stored b1 view.
inline std::vector<double> weights_from_view(const QuantizedWeightView& view, int b) {
    return mean_align(dequantize(truncate_codes(view, b), b), view.mean_b1);
}

/// Real-valued weights used at bit-width b, computed from the latent tensor.
inline std::vector<double> quantized_weight_values(const Tensor& w, int b, int b1) {
    return weights_from_view(quantize_weights_dorefa(w, b1), b);
}

/// Forward: `values`. Backward: identity to `w`.
inline Tensor straight_through(Tape& tape, const Tensor& w, std::vector<double> values) {
    Tensor out(w.shape(), std::move(values));
    auto wi = w.impl();
    return tape.record("quantize_weights", out, {&w}, [wi](std::span<const double> g) {
        if (auto* gw = grad_sink(wi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gw)[i] += g[i];
    });
}

/// Forward: the truncated, mean-aligned b-bit weights. Backward: identity to `w`.
inline Tensor quantize_weights_at(Tape& tape, const Tensor& w, int b, int b1) {
    return straight_through(tape, w, quantized_weight_values(w, b, b1));
}

/// Projects a clip value onto [kAlphaFloor, inf).
inline double project_alpha(double alpha) {
    if (!(alpha >= kAlphaFloor)) {
        quant_warning_sink()("clip value " + std::to_string(alpha) + " projected to " + std::to_string(kAlphaFloor));
        return kAlphaFloor;
    }
    return alpha;
}

/// PACT-style activation quantizer: alpha * quantize_levels(clip(A, 0, alpha) / alpha, b).
/// Backward to A passes the gradient on [0, alpha) and blocks it elsewhere;
/// backward to alpha sums the upstream gradient over saturated entries (A >= alpha).
inline Tensor quantize_activation(Tape& tape, const Tensor& a, const Tensor& alpha, int b) {
    check_bits(b);
    if (alpha.numel() != 1) throw DimensionError("quantize_activation: alpha must be a scalar");
    const double al = project_alpha(alpha[0]);
    Tensor out(a.shape());
    const double n = static_cast<double>(max_code(b));
    const double* A = a.data().data();
    double* O = out.data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double v = A[i];
        O[i] = v >= al ? al : v <= 0.0 ? 0.0 : al * (std::round(n * (v / al)) / n);
    }
    check_finite("quantize_activation", out.data());
    auto ai = a.impl(), alphai = alpha.impl();
    return tape.record("quantize_activation", out, {&a, &alpha}, [ai, alphai, al](std::span<const double> g) {
        auto* ga = grad_sink(ai);
        auto* gal = grad_sink(alphai);
        double dalpha = 0.0;
        const double* A = ai->data.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = A[i];
            if (v >= al) {
                dalpha += g[i];
            } else if (v >= 0.0 && ga) {
                (*ga)[i] += g[i];
            }
        }
        if (gal) (*gal)[0] += dalpha;
    });
}

}  // namespace aq
