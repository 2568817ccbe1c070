#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aq/error.hpp"

namespace aq {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// One named random stream. Only the raw 64-bit engine is used; every
/// distribution below is written out so that the engine state alone
/// determines all future draws (which is what checkpoints store).
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::uint64_t stream_id) : engine_(splitmix64(seed ^ splitmix64(stream_id))) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Box-Muller; consumes exactly two engine outputs per call.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n) by rejection (no modulo bias).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw FormatError("corrupt random stream state");
    }

    bool operator==(const RngStream& o) const { return engine_ == o.engine_; }

private:
    std::mt19937_64 engine_{0};
};

/// Stream identifiers. Each consumer draws from its own stream so that adding
/// draws in one place never shifts another's sequence.
enum class Stream : std::uint64_t { Init = 1, Shuffle = 2, Swap = 3, Data = 4 };

inline RngStream make_stream(std::uint64_t seed, Stream id) { return RngStream(seed, static_cast<std::uint64_t>(id)); }

struct RngStreams {
    RngStream init;
    RngStream shuffle;
    RngStream swap;

    explicit RngStreams(std::uint64_t seed = 0)
        : init(make_stream(seed, Stream::Init)),
          shuffle(make_stream(seed, Stream::Shuffle)),
          swap(make_stream(seed, Stream::Swap)) {}
};

}  // namespace aq
