#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aq/aq.hpp"

namespace aqtest {

using namespace aq;

/// Small generator over a seeded stream.
struct Gen {
    RngStream rng;
    explicit Gen(std::uint64_t seed) : rng(seed, 0xfeed) {}

    double uniform(double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }
    int integer(int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }
    std::vector<double> values(std::size_t n, double lo, double hi) {
        std::vector<double> v(n);
        for (double& x : v) x = uniform(lo, hi);
        return v;
    }
    Tensor tensor(Shape s, double lo, double hi, bool grad = true) {
        const std::size_t n = shape_numel(s);
        Tensor t(std::move(s), values(n, lo, hi));
        if (grad) t.set_requires_grad();
        return t;
    }
};

using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct FdResult {
    double worst = 0.0;  // largest |analytic - numeric| / max(|analytic|, |numeric|, floor)
    std::size_t checked = 0;
};

/// Central differences of f at every input entry vs. the tape gradient.
inline FdResult fd_check(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-4, double floor = 1e-3) {
    for (auto& t : inputs) t.zero_grad();
    {
        Tape tape;
        Tensor loss = f(tape, inputs);
        tape.backward(loss);
    }
    FdResult r;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double x0 = t.data()[i];
            t.data()[i] = x0 + h;
            Tape tp;
            const double fp = f(tp, inputs).item();
            t.data()[i] = x0 - h;
            Tape tm;
            const double fm = f(tm, inputs).item();
            t.data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            r.worst = std::max(r.worst, std::abs(analytic[i] - numeric) / scale);
            ++r.checked;
        }
    }
    return r;
}

/// sum(out * weights) with fixed weights: turns any tensor into a scalar whose
/// gradient exercises every output entry differently.
inline Tensor weighted_sum(Tape& tape, const Tensor& out, std::uint64_t seed = 7) {
    Gen g(seed);
    Tensor w = g.tensor(out.shape(), -1.0, 1.0, false);
    return sum(tape, mul(tape, out, w));
}

inline RunConfig desk_config(Mode mode = Mode::CoQuant, std::vector<int> bits = {8, 4, 2}, int mode_bits = 0) {
    RunConfig c;
    c.mode = mode;
    c.mode_bits = mode_bits;
    c.bits = std::move(bits);
    c.epochs = 30;
    c.batch_size = 64;
    c.arch = make_mlp(8, 64, 2, 4);
    c.dataset.kind = DatasetKind::SyntheticBlobs;
    c.dataset.classes = 4;
    c.dataset.samples = 4000;
    c.dataset.test_samples = 1000;
    c.dataset.dim = 8;
    c.dataset.spread = 1.0;
    c.dataset.center_scale = 1.5;
    return c;
}

/// A quick variant of the desk task for unit tests.
inline RunConfig tiny_config(Mode mode = Mode::CoQuant, std::vector<int> bits = {8, 4, 2}, int mode_bits = 0) {
    RunConfig c = desk_config(mode, std::move(bits), mode_bits);
    c.epochs = 3;
    c.batch_size = 32;
    c.arch = make_mlp(4, 16, 2, 3);
    c.dataset.classes = 3;
    c.dataset.samples = 300;
    c.dataset.test_samples = 150;
    c.dataset.dim = 4;
    return c;
}

}  // namespace aqtest
