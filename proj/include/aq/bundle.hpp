#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aq/binary_io.hpp"
#include "aq/checkpoint.hpp"
#include "aq/network.hpp"

namespace aq {

inline constexpr std::string_view kBundleMagic = "AQDB";
inline constexpr std::uint32_t kBundleVersion = 1;

/// Sizes of the weight section of a bundle.
struct BundleStats {
    std::size_t total_bytes = 0;
    std::size_t code_bytes = 0;            // packed codes of the quantized layers
    std::size_t quantized_weights = 0;     // number of weights those codes represent
    std::size_t float_weight_bytes = 0;    // unquantized layers stored as f64

    /// Code payload relative to storing the same weights as 32-bit floats.
    double payload_ratio() const {
        return quantized_weights == 0 ? 0.0 : static_cast<double>(code_bytes) / (4.0 * quantized_weights);
    }
};

inline std::size_t code_width_bytes(int b1) { return static_cast<std::size_t>((b1 + 7) / 8); }

/// Serializes an inference-only network: b1 codes for quantized layers, f64
/// weights for the full-precision ones, every BN/clip bank.
inline std::vector<std::uint8_t> serialize_bundle(const AdaptiveNetwork& source, BundleStats* stats = nullptr) {
    AdaptiveNetwork net = source;
    net.freeze_to_codes();
    const int b1 = net.b1();
    const std::size_t width = code_width_bytes(b1);
    ByteWriter w;
    BundleStats st;
    w.raw(kBundleMagic);
    w.u32(kBundleVersion);
    Json meta{{"arch", to_json(net.arch())},
              {"bits", net.bits().bits()},
              {"per_bit_bn", net.policy().per_bit_bn},
              {"per_bit_alpha", net.policy().per_bit_alpha}};
    w.str(meta.dump());
    std::uint32_t learnable = 0;
    for (const auto& l : net.arch().layers) learnable += l.learnable() ? 1 : 0;
    w.u32(learnable);
    for (std::size_t i = 0; i < net.arch().layers.size(); ++i) {
        const LayerDesc& l = net.arch().layers[i];
        if (!l.learnable()) continue;
        const auto& p = net.layers()[i];
        w.str("layer" + std::to_string(i));
        w.u32(static_cast<std::uint32_t>(i));
        if (p.frozen) {
            w.u8(static_cast<std::uint8_t>(b1));
            detail::write_shape(w, p.frozen->shape);
            const std::size_t before = w.size();
            for (std::uint32_t c : p.frozen->codes)
                for (std::size_t k = 0; k < width; ++k) w.u8(static_cast<std::uint8_t>(c >> (8 * k)));
            st.code_bytes += w.size() - before;
            st.quantized_weights += p.frozen->codes.size();
            w.f64(p.frozen->mean_b1);
        } else {
            w.u8(0);
            detail::write_shape(w, p.weight.shape());
            for (double v : p.weight.values()) w.f64(v);
            st.float_weight_bytes += 8 * p.weight.numel();
        }
        w.u8(p.bias.defined() ? 1 : 0);
        if (p.bias.defined()) w.f64s(p.bias.values());
    }
    detail::write_banks(w, net, false);
    w.seal();
    st.total_bytes = w.size();
    if (stats) *stats = st;
    return w.buffer();
}

inline BundleStats export_bundle(const std::string& path, const AdaptiveNetwork& net) {
    BundleStats st;
    atomic_write(path, serialize_bundle(net, &st));
    return st;
}

inline AdaptiveNetwork parse_bundle(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    ByteReader r(bytes, what);
    r.verify_crc();
    r.expect_magic(kBundleMagic);
    const std::uint32_t version = r.u32();
    if (version != kBundleVersion) r.fail("unsupported bundle version " + std::to_string(version));
    ArchSpec arch;
    BitWidthSet bits;
    BankPolicy policy;
    try {
        const Json meta = Json::parse(r.str());
        arch = arch_from_json(meta.at("arch"));
        bits = BitWidthSet(meta.at("bits").get<std::vector<int>>());
        policy.per_bit_bn = meta.at("per_bit_bn").get<bool>();
        policy.per_bit_alpha = meta.at("per_bit_alpha").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad metadata: ") + e.what());
    } catch (const ConfigError& e) {
        r.fail(std::string("bad metadata: ") + e.what());
    }
    const int b1 = bits.b1();
    const std::size_t width = code_width_bytes(b1);
    std::vector<AdaptiveNetwork::LayerParams> layers(arch.layers.size());
    const std::uint32_t count = r.u32();
    for (std::uint32_t n = 0; n < count; ++n) {
        (void)r.str();
        const std::uint32_t i = r.u32();
        if (i >= arch.layers.size() || !arch.layers[i].learnable()) r.fail("weights for non-learnable layer " + std::to_string(i));
        auto& p = layers[i];
        const int code_bits = r.u8();
        const Shape shape = detail::read_shape(r);
        if (code_bits != 0) {
            if (code_bits != b1) r.fail("codes at " + std::to_string(code_bits) + " bits, expected " + std::to_string(b1));
            QuantizedWeightView v;
            v.shape = shape;
            v.b1 = b1;
            v.codes.resize(shape_numel(shape));
            for (auto& c : v.codes) {
                std::uint32_t x = 0;
                for (std::size_t k = 0; k < width; ++k) x |= static_cast<std::uint32_t>(r.u8()) << (8 * k);
                if (x > max_code(b1)) r.fail("code " + std::to_string(x) + " out of range");
                c = x;
            }
            v.mean_b1 = r.f64();
            p.frozen = std::move(v);
        } else {
            std::vector<double> vals(shape_numel(shape));
            for (auto& x : vals) x = r.f64();
            p.weight = Tensor(shape, std::move(vals));
        }
        if (r.u8()) {
            std::vector<double> b = r.f64s();
            const std::size_t nb = b.size();
            p.bias = Tensor(Shape{nb}, std::move(b));
        }
    }
    detail::Banks banks = detail::read_banks(r, false, false);
    r.expect_end();
    return AdaptiveNetwork::assemble(std::move(arch), std::move(bits), policy, std::move(layers), std::move(banks.bn),
                                     std::move(banks.alpha));
}

inline AdaptiveNetwork load_bundle(const std::string& path) {
    return parse_bundle(read_binary_file(path), "bundle '" + path + "'");
}

}  // namespace aq
