#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace aqtest {

// Step-by-step re-evaluation of the weight pipeline, sharing no code with the library.
namespace oracle {

inline double levels(double x, int b) {
    const double n = std::pow(2.0, b) - 1.0;
    return std::round(n * x) / n;
}

inline std::vector<double> dorefa(const std::vector<double>& w, int b) {
    double m = 0.0;
    for (double v : w) m = std::max(m, std::fabs(std::tanh(v)));
    std::vector<double> out;
    for (double v : w) out.push_back(2.0 * levels(std::tanh(v) / (2.0 * m) + 0.5, b) - 1.0);
    return out;
}

inline std::vector<double> at_bits(const std::vector<double>& w, int b, int b1) {
    double m = 0.0;
    for (double v : w) m = std::max(m, std::fabs(std::tanh(v)));
    const double n1 = std::pow(2.0, b1) - 1.0, nb = std::pow(2.0, b) - 1.0;
    std::vector<double> hi, lo;
    for (double v : w) {
        const auto code = static_cast<long long>(std::round(n1 * (std::tanh(v) / (2.0 * m) + 0.5)));
        hi.push_back(2.0 * static_cast<double>(code) / n1 - 1.0);
        const long long shifted = code / (1LL << (b1 - b));
        lo.push_back(2.0 * static_cast<double>(shifted) / nb - 1.0);
    }
    double mh = 0.0, ml = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        mh += hi[i];
        ml += lo[i];
    }
    mh /= static_cast<double>(w.size());
    ml /= static_cast<double>(w.size());
    for (double& v : lo) v += mh - ml;
    return lo;
}

}  // namespace oracle

}  // namespace aqtest
