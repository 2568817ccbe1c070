#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "aq/json_util.hpp"
#include "aq/quantize.hpp"
#include "aq/tensor.hpp"

namespace aq {

enum class LayerKind { Dense, Conv, BatchNorm, Relu, MaxPool, Flatten };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv: return "conv";
        case LayerKind::BatchNorm: return "bn";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

struct LayerDesc {
    LayerKind kind = LayerKind::Dense;
    std::size_t units = 0;  // dense outputs or conv filters
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool quantized = false;
    bool bias = false;

    bool learnable() const { return kind == LayerKind::Dense || kind == LayerKind::Conv; }
};

/// Sequential architecture. Quantized layers take PACT-quantized inputs and
/// truncated weights; the first and last learnable layers stay full precision.
struct ArchSpec {
    Shape input_shape;  // per sample: {features} or {C, H, W}
    std::vector<LayerDesc> layers;

    /// Indices into `layers` of the quantized learnable layers, input to output.
    std::vector<std::size_t> quantized_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].learnable() && layers[i].quantized) out.push_back(i);
        return out;
    }

    std::size_t num_blocks() const { return quantized_layers().size(); }

    /// Per-sample output shape of every layer; throws on inconsistent specs.
    std::vector<Shape> validate() const {
        if (input_shape.empty() || input_shape.size() == 2 || input_shape.size() > 3) {
            throw ConfigError("arch: input_shape must be [features] or [C, H, W]");
        }
        std::vector<std::size_t> learnable;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].learnable()) learnable.push_back(i);
        if (learnable.empty()) throw ConfigError("arch: no learnable layers");
        if (layers[learnable.front()].quantized || layers[learnable.back()].quantized) {
            throw ConfigError("arch: the first and last learnable layers must be unquantized");
        }
        std::vector<Shape> shapes;
        Shape cur = input_shape;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerDesc& l = layers[i];
            const std::string where = "arch.layers[" + std::to_string(i) + "] (" + to_string(l.kind) + ")";
            switch (l.kind) {
                case LayerKind::Dense:
                    if (cur.size() != 1) throw ConfigError(where + ": dense needs flat input, got " + shape_str(cur));
                    if (l.units == 0) throw ConfigError(where + ": units must be positive");
                    cur = Shape{l.units};
                    break;
                case LayerKind::Conv:
                    if (cur.size() != 3) throw ConfigError(where + ": conv needs CHW input, got " + shape_str(cur));
                    if (l.units == 0 || l.kernel == 0 || l.stride == 0) {
                        throw ConfigError(where + ": filters, kernel and stride must be positive");
                    }
                    if (l.kernel > cur[1] + 2 * l.padding || l.kernel > cur[2] + 2 * l.padding) {
                        throw ConfigError(where + ": kernel larger than padded input");
                    }
                    cur = Shape{l.units, (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                                (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1};
                    break;
                case LayerKind::BatchNorm:
                    if (i == 0 || !layers[i - 1].learnable()) {
                        throw ConfigError(where + ": batch norm must directly follow a dense or conv layer");
                    }
                    break;
                case LayerKind::Relu: break;
                case LayerKind::MaxPool:
                    if (cur.size() != 3) throw ConfigError(where + ": maxpool needs CHW input");
                    if (l.kernel == 0 || l.stride == 0 || l.kernel > cur[1] || l.kernel > cur[2]) {
                        throw ConfigError(where + ": bad pooling window");
                    }
                    cur = Shape{cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
                    break;
                case LayerKind::Flatten: cur = Shape{shape_numel(cur)}; break;
            }
            shapes.push_back(cur);
        }
        if (cur.size() != 1) throw ConfigError("arch: network output must be flat, got " + shape_str(cur));
        return shapes;
    }

    std::size_t num_classes() const { return validate().back()[0]; }
};

inline LayerKind layer_kind_from(const std::string& s) {
    for (auto k : {LayerKind::Dense, LayerKind::Conv, LayerKind::BatchNorm, LayerKind::Relu, LayerKind::MaxPool,
                   LayerKind::Flatten}) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("arch: unknown layer type '" + s + "'");
}

inline Json to_json(const ArchSpec& a) {
    Json layers = Json::array();
    for (const auto& l : a.layers) {
        Json j{{"type", to_string(l.kind)}};
        switch (l.kind) {
            case LayerKind::Dense:
                j["units"] = l.units;
                j["quantized"] = l.quantized;
                j["bias"] = l.bias;
                break;
            case LayerKind::Conv:
                j["filters"] = l.units;
                j["kernel"] = l.kernel;
                j["stride"] = l.stride;
                j["padding"] = l.padding;
                j["quantized"] = l.quantized;
                j["bias"] = l.bias;
                break;
            case LayerKind::MaxPool:
                j["kernel"] = l.kernel;
                j["stride"] = l.stride;
                break;
            default: break;
        }
        layers.push_back(j);
    }
    return Json{{"input_shape", a.input_shape}, {"layers", layers}};
}

inline ArchSpec arch_from_json(const Json& j) {
    reject_unknown_keys(j, {"input_shape", "layers"}, "arch");
    ArchSpec a;
    a.input_shape = json_get<Shape>(j, "input_shape", "arch");
    if (!j.contains("layers") || !j["layers"].is_array()) throw ConfigError("arch: 'layers' must be an array");
    for (std::size_t i = 0; i < j["layers"].size(); ++i) {
        const Json& lj = j["layers"][i];
        const std::string where = "arch.layers[" + std::to_string(i) + "]";
        LayerDesc l;
        l.kind = layer_kind_from(json_get<std::string>(lj, "type", where));
        switch (l.kind) {
            case LayerKind::Dense:
                reject_unknown_keys(lj, {"type", "units", "quantized", "bias"}, where);
                l.units = json_get<std::size_t>(lj, "units", where);
                l.quantized = json_get_or<bool>(lj, "quantized", false, where);
                l.bias = json_get_or<bool>(lj, "bias", false, where);
                break;
            case LayerKind::Conv:
                reject_unknown_keys(lj, {"type", "filters", "kernel", "stride", "padding", "quantized", "bias"}, where);
                l.units = json_get<std::size_t>(lj, "filters", where);
                l.kernel = json_get<std::size_t>(lj, "kernel", where);
                l.stride = json_get_or<std::size_t>(lj, "stride", 1, where);
                l.padding = json_get_or<std::size_t>(lj, "padding", 0, where);
                l.quantized = json_get_or<bool>(lj, "quantized", false, where);
                l.bias = json_get_or<bool>(lj, "bias", false, where);
                break;
            case LayerKind::MaxPool:
                reject_unknown_keys(lj, {"type", "kernel", "stride"}, where);
                l.kernel = json_get<std::size_t>(lj, "kernel", where);
                l.stride = json_get_or<std::size_t>(lj, "stride", l.kernel, where);
                break;
            default: reject_unknown_keys(lj, {"type"}, where); break;
        }
        a.layers.push_back(l);
    }
    a.validate();
    return a;
}

/// MLP with an unquantized input layer, `blocks` quantized hidden blocks and an
/// unquantized classifier. Every hidden layer is `width` wide and followed by BN.
inline ArchSpec make_mlp(std::size_t inputs, std::size_t width, std::size_t blocks, std::size_t classes) {
    ArchSpec a;
    a.input_shape = {inputs};
    a.layers.push_back({LayerKind::Dense, width});
    a.layers.push_back({LayerKind::BatchNorm});
    for (std::size_t i = 0; i < blocks; ++i) {
        LayerDesc q{LayerKind::Dense, width};
        q.quantized = true;
        a.layers.push_back(q);
        a.layers.push_back({LayerKind::BatchNorm});
    }
    a.layers.push_back({LayerKind::Relu});
    LayerDesc out{LayerKind::Dense, classes};
    out.bias = true;
    a.layers.push_back(out);
    return a;
}

/// The set of trained bit-widths, strictly descending; front() is b1.
class BitWidthSet {
public:
    BitWidthSet() = default;
    explicit BitWidthSet(std::vector<int> bits) : bits_(std::move(bits)) {
        if (bits_.empty()) throw ConfigError("bit-width set is empty");
        std::sort(bits_.begin(), bits_.end(), std::greater<>());
        for (std::size_t i = 0; i < bits_.size(); ++i) {
            if (bits_[i] < 2 || bits_[i] > kMaxBits) {
                throw ConfigError("bit-width " + std::to_string(bits_[i]) + " outside [2, " +
                                  std::to_string(kMaxBits) + "]");
            }
            if (i > 0 && bits_[i] == bits_[i - 1]) {
                throw ConfigError("duplicate bit-width " + std::to_string(bits_[i]));
            }
        }
    }

    int b1() const { return bits_.front(); }
    std::size_t size() const { return bits_.size(); }
    int operator[](std::size_t k) const { return bits_[k]; }
    bool contains(int b) const { return std::find(bits_.begin(), bits_.end(), b) != bits_.end(); }
    const std::vector<int>& bits() const { return bits_; }
    auto begin() const { return bits_.begin(); }
    auto end() const { return bits_.end(); }

private:
    std::vector<int> bits_;
};

}  // namespace aq
