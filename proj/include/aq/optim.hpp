#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aq/tensor.hpp"

namespace aq {

struct SgdHyper {
    double lr = 0.1;
    double momentum = 0.0;
    double weight_decay = 0.0;
};

/// One SGD-with-momentum update in place:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// Rejects NaN/Inf gradients before touching anything.
inline void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
                     const SgdHyper& h) {
    if (!(h.lr > 0.0)) throw ConfigError("sgd: learning rate must be positive");
    if (!(h.momentum >= 0.0 && h.momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0, 1)");
    if (param.size() != grad.size() || param.size() != velocity.size()) {
        throw DimensionError("sgd: parameter, gradient and velocity sizes differ");
    }
    for (double g : grad) {
        if (!std::isfinite(g)) throw NumericError("sgd: non-finite gradient, step aborted");
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = h.momentum * velocity[i] + grad[i] + h.weight_decay * param[i];
        param[i] -= h.lr * velocity[i];
    }
}

/// A parameter as the optimizer sees it: stable name (keys the momentum
/// buffer), the tensor, its hyper-parameters, and an optional lower bound
/// re-applied after each step.
struct NamedParam {
    std::string name;
    Tensor tensor;
    SgdHyper hyper;
    std::optional<double> floor;
};

class Sgd {
public:
    /// Updates every parameter that received a gradient. `lr_scale` multiplies
    /// each parameter's own learning rate (the schedule). All gradients are
    /// validated first so a bad one leaves every parameter untouched.
    void step(std::vector<NamedParam>& params, double lr_scale = 1.0) {
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double g : p.tensor.grad()) {
                if (!std::isfinite(g)) throw NumericError("sgd: non-finite gradient in '" + p.name + "', step aborted");
            }
        }
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            auto& v = velocity_[p.name];
            if (v.empty()) v.assign(p.tensor.numel(), 0.0);
            SgdHyper h = p.hyper;
            h.lr *= lr_scale;
            sgd_step(p.tensor.data(), p.tensor.grad(), v, h);
            if (p.floor) {
                for (double& x : p.tensor.data()) x = std::max(x, *p.floor);
            }
        }
    }

    const std::map<std::string, std::vector<double>>& state() const { return velocity_; }
    std::map<std::string, std::vector<double>>& state() { return velocity_; }

private:
    std::map<std::string, std::vector<double>> velocity_;
};

/// Multiplicative learning-rate factor: x0.1 at 50% and again at 75% of the epochs.
inline double step_decay_factor(int epoch, int total_epochs) {
    const int first = total_epochs / 2;
    const int second = (3 * total_epochs) / 4;
    double f = 1.0;
    if (first > 0 && epoch >= first) f *= 0.1;
    if (second > 0 && epoch >= second) f *= 0.1;
    return f;
}

}  // namespace aq
