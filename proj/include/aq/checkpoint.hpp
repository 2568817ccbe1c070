#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aq/binary_io.hpp"
#include "aq/config.hpp"
#include "aq/network.hpp"
#include "aq/optim.hpp"
#include "aq/rng.hpp"
#include "aq/trainer.hpp"

namespace aq {

inline constexpr std::string_view kCheckpointMagic = "AQCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_shape(ByteWriter& w, const Shape& s) {
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) w.u64(d);
}

inline Shape read_shape(ByteReader& r) {
    const std::uint32_t n = r.u32();
    if (n > 8) r.fail("implausible rank " + std::to_string(n));
    Shape s(n);
    for (auto& d : s) d = r.u64();
    return s;
}

inline Tensor read_tensor_values(ByteReader& r, const Shape& shape, bool trainable) {
    std::vector<double> v = r.f64s();
    if (v.size() != shape_numel(shape)) r.fail("tensor of " + std::to_string(v.size()) + " values for " + shape_str(shape));
    Tensor t(shape, std::move(v));
    if (trainable) t.set_requires_grad();
    return t;
}

inline void write_banks(ByteWriter& w, const AdaptiveNetwork& net, bool with_calib) {
    w.u32(static_cast<std::uint32_t>(net.bn_banks().size()));
    for (const auto& [b, bank] : net.bn_banks()) {
        w.u32(static_cast<std::uint32_t>(b));
        w.u32(static_cast<std::uint32_t>(bank.size()));
        for (const auto& e : bank) {
            w.f64s(e.gamma.values());
            w.f64s(e.beta.values());
            w.f64s(e.running_mean);
            w.f64s(e.running_var);
            w.f64(e.momentum);
            w.f64(e.eps);
            if (with_calib) w.u64(e.calib_batches);
        }
    }
    w.u32(static_cast<std::uint32_t>(net.alpha_banks().size()));
    for (const auto& [b, bank] : net.alpha_banks()) {
        w.u32(static_cast<std::uint32_t>(b));
        w.u32(static_cast<std::uint32_t>(bank.size()));
        for (const auto& a : bank) w.f64(a[0]);
    }
}

struct Banks {
    std::map<int, std::vector<BnEntry>> bn;
    std::map<int, std::vector<Tensor>> alpha;
};

inline Banks read_banks(ByteReader& r, bool with_calib, bool trainable) {
    Banks out;
    const std::uint32_t nb = r.u32();
    for (std::uint32_t i = 0; i < nb; ++i) {
        const auto b = static_cast<int>(r.u32());
        if (b < kMinBits || b > kMaxBits) r.fail("bank for invalid bit-width " + std::to_string(b));
        const std::uint32_t count = r.u32();
        std::vector<BnEntry> bank;
        for (std::uint32_t k = 0; k < count; ++k) {
            BnEntry e;
            std::vector<double> g = r.f64s(), be = r.f64s();
            e.running_mean = r.f64s();
            e.running_var = r.f64s();
            const std::size_t c = e.running_mean.size();
            if (g.size() != c || be.size() != c || e.running_var.size() != c) r.fail("inconsistent batch-norm entry");
            e.gamma = Tensor(Shape{c}, std::move(g));
            e.beta = Tensor(Shape{c}, std::move(be));
            if (trainable) {
                e.gamma.set_requires_grad();
                e.beta.set_requires_grad();
            }
            e.momentum = r.f64();
            e.eps = r.f64();
            if (with_calib) e.calib_batches = r.u64();
            bank.push_back(std::move(e));
        }
        out.bn[b] = std::move(bank);
    }
    const std::uint32_t na = r.u32();
    for (std::uint32_t i = 0; i < na; ++i) {
        const auto b = static_cast<int>(r.u32());
        if (b < kMinBits || b > kMaxBits) r.fail("clip bank for invalid bit-width " + std::to_string(b));
        const std::uint32_t count = r.u32();
        std::vector<Tensor> bank;
        for (std::uint32_t k = 0; k < count; ++k) {
            Tensor a = Tensor::scalar(r.f64());
            if (trainable) a.set_requires_grad();
            bank.push_back(a);
        }
        out.alpha[b] = std::move(bank);
    }
    return out;
}

}  // namespace detail

/// Everything needed to continue a run or to evaluate it.
struct CheckpointData {
    RunConfig config;
    int epoch = 0;  // epochs completed
    AdaptiveNetwork net;
    std::map<std::string, std::vector<double>> velocity;
    std::string rng_init, rng_shuffle, rng_swap;
};

inline std::vector<std::uint8_t> serialize_checkpoint(const RunConfig& config, int epoch, const AdaptiveNetwork& net,
                                                      const Sgd& opt, const RngStreams& rng) {
    if (net.frozen()) throw ContractError("cannot checkpoint a network whose weights were frozen to codes");
    ByteWriter w;
    w.raw(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.str(to_json(config).dump());
    w.u64(static_cast<std::uint64_t>(epoch));
    w.u32(static_cast<std::uint32_t>(net.layers().size()));
    for (const auto& p : net.layers()) {
        const bool has_w = p.weight.defined();
        w.u8(has_w ? 1 : 0);
        if (has_w) {
            detail::write_shape(w, p.weight.shape());
            w.f64s(p.weight.values());
        }
        const bool has_b = p.bias.defined();
        w.u8(has_b ? 1 : 0);
        if (has_b) w.f64s(p.bias.values());
    }
    detail::write_banks(w, net, true);
    w.u32(static_cast<std::uint32_t>(opt.state().size()));
    for (const auto& [name, v] : opt.state()) {
        w.str(name);
        w.f64s(v);
    }
    w.str(rng.init.state());
    w.str(rng.shuffle.state());
    w.str(rng.swap.state());
    w.seal();
    return w.buffer();
}

inline void save_checkpoint(const std::string& path, const Trainer& t) {
    auto& tr = const_cast<Trainer&>(t);
    atomic_write(path, serialize_checkpoint(t.config(), t.epoch(), t.network(), tr.optimizer(), tr.rng()));
}

inline void save_checkpoint(const std::string& path, const CheckpointData& c) {
    Sgd opt;
    opt.state() = c.velocity;
    RngStreams rng;
    rng.init.set_state(c.rng_init);
    rng.shuffle.set_state(c.rng_shuffle);
    rng.swap.set_state(c.rng_swap);
    atomic_write(path, serialize_checkpoint(c.config, c.epoch, c.net, opt, rng));
}

inline CheckpointData parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    ByteReader r(bytes, what);
    r.verify_crc();
    r.expect_magic(kCheckpointMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    CheckpointData c;
    try {
        c.config = config_from_json(Json::parse(r.str()));
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("embedded config is not valid JSON: ") + e.what());
    }
    c.epoch = static_cast<int>(r.u64());
    const ArchSpec& arch = c.config.arch;
    const std::uint32_t nl = r.u32();
    if (nl != arch.layers.size()) r.fail("layer count " + std::to_string(nl) + " does not match the architecture");
    std::vector<AdaptiveNetwork::LayerParams> layers(nl);
    for (std::uint32_t i = 0; i < nl; ++i) {
        if (r.u8()) {
            const Shape s = detail::read_shape(r);
            layers[i].weight = detail::read_tensor_values(r, s, true);
        }
        if (r.u8()) {
            std::vector<double> b = r.f64s();
            const std::size_t n = b.size();
            layers[i].bias = Tensor(Shape{n}, std::move(b));
            layers[i].bias.set_requires_grad();
        }
    }
    detail::Banks banks = detail::read_banks(r, true, true);
    const std::uint32_t nv = r.u32();
    for (std::uint32_t i = 0; i < nv; ++i) {
        std::string name = r.str();
        c.velocity[name] = r.f64s();
    }
    c.rng_init = r.str();
    c.rng_shuffle = r.str();
    c.rng_swap = r.str();
    r.expect_end();
    c.net = AdaptiveNetwork::assemble(arch, c.config.bit_set(), c.config.bank_policy(), std::move(layers),
                                      std::move(banks.bn), std::move(banks.alpha));
    return c;
}

inline CheckpointData load_checkpoint(const std::string& path) {
    return parse_checkpoint(read_binary_file(path), "checkpoint '" + path + "'");
}

/// Puts a trainer into the state stored in `c` (same config assumed).
inline void restore(Trainer& t, CheckpointData c) {
    t.network() = std::move(c.net);
    t.optimizer().state() = std::move(c.velocity);
    t.rng().init.set_state(c.rng_init);
    t.rng().shuffle.set_state(c.rng_shuffle);
    t.rng().swap.set_state(c.rng_swap);
    t.set_epoch(c.epoch);
}

}  // namespace aq
