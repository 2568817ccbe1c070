#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aq/arch.hpp"
#include "aq/batchnorm.hpp"
#include "aq/ops.hpp"
#include "aq/optim.hpp"
#include "aq/quantize.hpp"
#include "aq/rng.hpp"
#include "aq/tape.hpp"

namespace aq {

/// Which precision-specific parameters are kept separately per bit-width.
/// Anything not kept per bit-width lives in a single shared bank filed under b1.
struct BankPolicy {
    bool per_bit_bn = true;
    bool per_bit_alpha = true;

    bool operator==(const BankPolicy&) const = default;
};

/// beta[l] == true runs block l as the student; false swaps in the teacher.
struct SwapMask {
    std::vector<bool> beta;

    static SwapMask all_student(std::size_t blocks) { return SwapMask{std::vector<bool>(blocks, true)}; }
    bool is_all_student() const {
        return std::all_of(beta.begin(), beta.end(), [](bool b) { return b; });
    }
    double student_fraction() const {
        if (beta.empty()) return 1.0;
        return static_cast<double>(std::count(beta.begin(), beta.end(), true)) / static_cast<double>(beta.size());
    }
};

enum class Phase { Train, Eval, Collect };

struct ForwardOptions {
    int bits = 8;
    Phase phase = Phase::Eval;
    const SwapMask* mask = nullptr;   // null: every block is the student
    std::optional<int> teacher_bits;  // required when the mask swaps any block
    std::optional<int> bank_bits;     // run the student with another bit-width's BN/clip bank
};

enum class ParamKind { Weight, Bias, BnAffine, Alpha };

struct NetworkParam {
    std::string name;
    Tensor tensor;
    ParamKind kind;
};

/// One set of latent weights executable at any bit-width, with per-precision
/// batch-norm and clipping banks.
class AdaptiveNetwork {
public:
    struct LayerParams {
        Tensor weight;                              // latent full-precision weights (undefined when frozen)
        Tensor bias;                                // optional
        std::optional<QuantizedWeightView> frozen;  // deployed b1 codes replace the latent tensor
    };

    AdaptiveNetwork() = default;

    AdaptiveNetwork(ArchSpec arch, BitWidthSet bits, BankPolicy policy, double alpha_init, double bn_momentum,
                    RngStream& init)
        : arch_(std::move(arch)), bits_(std::move(bits)), policy_(policy) {
        shapes_ = arch_.validate();
        Shape in = arch_.input_shape;
        for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
            const LayerDesc& l = arch_.layers[i];
            LayerParams p;
            if (l.kind == LayerKind::Dense) {
                p.weight = he_init(Shape{in[0], l.units}, in[0], init);
                if (l.bias) p.bias = Tensor::zeros(Shape{l.units}).set_requires_grad();
            } else if (l.kind == LayerKind::Conv) {
                const std::size_t fan_in = in[0] * l.kernel * l.kernel;
                p.weight = he_init(Shape{l.units, in[0], l.kernel, l.kernel}, fan_in, init);
                if (l.bias) p.bias = Tensor::zeros(Shape{l.units}).set_requires_grad();
            }
            params_.push_back(std::move(p));
            in = shapes_[i];
        }
        const auto make_bn = [&] {
            std::vector<BnEntry> bank;
            for (std::size_t i = 0; i < arch_.layers.size(); ++i)
                if (arch_.layers[i].kind == LayerKind::BatchNorm) bank.push_back(BnEntry::make(shapes_[i][0], bn_momentum));
            return bank;
        };
        const auto make_alpha = [&] {
            std::vector<Tensor> bank;
            for (std::size_t q = 0; q < arch_.num_blocks(); ++q)
                bank.push_back(Tensor::scalar(alpha_init).set_requires_grad());
            return bank;
        };
        for (int b : bits_) {
            if (policy_.per_bit_bn || b == bits_.b1()) bn_banks_[b] = make_bn();
            if (policy_.per_bit_alpha || b == bits_.b1()) alpha_banks_[b] = make_alpha();
        }
    }

    const ArchSpec& arch() const { return arch_; }
    const BitWidthSet& bits() const { return bits_; }
    const BankPolicy& policy() const { return policy_; }
    int b1() const { return bits_.b1(); }
    std::size_t num_blocks() const { return arch_.num_blocks(); }
    std::size_t num_classes() const { return shapes_.back()[0]; }

    std::vector<LayerParams>& layers() { return params_; }
    const std::vector<LayerParams>& layers() const { return params_; }
    std::map<int, std::vector<BnEntry>>& bn_banks() { return bn_banks_; }
    const std::map<int, std::vector<BnEntry>>& bn_banks() const { return bn_banks_; }
    std::map<int, std::vector<Tensor>>& alpha_banks() { return alpha_banks_; }
    const std::map<int, std::vector<Tensor>>& alpha_banks() const { return alpha_banks_; }

    // -----------------------------------------------------------------------
    // Banks

    int bn_key(int b) const {
        if (bn_banks_.count(b)) return b;
        if (!policy_.per_bit_bn && bn_banks_.count(b1())) return b1();
        throw MissingBankError(b);
    }

    int alpha_key(int b) const {
        if (alpha_banks_.count(b)) return b;
        if (!policy_.per_bit_alpha && alpha_banks_.count(b1())) return b1();
        throw MissingBankError(b);
    }

    bool has_bank(int b) const {
        try {
            (void)bn_key(b);
            (void)alpha_key(b);
            return true;
        } catch (const MissingBankError&) {
            return false;
        }
    }

    /// Every bit-width the network can currently execute.
    std::vector<int> executable_bits() const {
        std::vector<int> out;
        for (int b = kMaxBits; b >= 2; --b)
            if (has_bank(b) && b <= b1()) out.push_back(b);
        return out;
    }

    /// Creates dedicated bank entries for `b` as deep copies of `source`'s.
    void add_bank(int b, int source) {
        check_bits(b);
        if (b > b1()) throw ConfigError("cannot add a bank above the stored " + std::to_string(b1()) + " bits");
        std::vector<BnEntry> bn;
        for (const auto& e : bn_banks_.at(bn_key(source))) bn.push_back(e.deep_copy());
        std::vector<Tensor> al;
        for (const auto& a : alpha_banks_.at(alpha_key(source))) al.push_back(a.clone());
        bn_banks_[b] = std::move(bn);
        alpha_banks_[b] = std::move(al);
    }

    // -----------------------------------------------------------------------
    // Execution

    /// Real-valued weights of learnable layer `layer` as executed at bit-width b.
    Tensor effective_weight(Tape& tape, std::size_t layer, int b) const {
        const LayerParams& p = params_.at(layer);
        if (!arch_.layers[layer].quantized) return p.weight;
        if (p.frozen) return Tensor(p.frozen->shape, weights_from_view(*p.frozen, b));
        return straight_through(tape, p.weight, quantized_values(layer, b));
    }

    std::vector<double> quantized_values(std::size_t layer, int b) const {
        const LayerParams& p = params_.at(layer);
        if (p.frozen) return weights_from_view(*p.frozen, b);
        check_bits(b);
        CodeCache& c = code_cache_[layer];
        const auto w = p.weight.data();
        if (c.source.size() != w.size() || !std::equal(w.begin(), w.end(), c.source.begin())) {
            c.view = quantize_weights_dorefa(p.weight, b1());
            c.source.assign(w.begin(), w.end());
            c.by_bits.clear();
        }
        auto it = c.by_bits.find(b);
        if (it == c.by_bits.end()) it = c.by_bits.emplace(b, weights_from_view(c.view, b)).first;
        return it->second;
    }

    /// Mixed-precision forward. Quantized block l runs at the student bit-width
    /// when mask->beta[l] is set and at the teacher bit-width otherwise; a
    /// swapped-in block also uses the teacher's BN and clipping entries and
    /// does not update the teacher's running statistics.
    Tensor forward(Tape& tape, const Tensor& x, const ForwardOptions& opt) {
        check_bits(opt.bits);
        if (opt.bits > b1()) {
            throw ContractError("cannot execute at " + std::to_string(opt.bits) + " bits above stored b1 = " +
                                std::to_string(b1()));
        }
        const std::size_t L = num_blocks();
        if (opt.mask) {
            if (opt.mask->beta.size() != L) {
                throw ContractError("swap mask has " + std::to_string(opt.mask->beta.size()) + " entries for " +
                                    std::to_string(L) + " blocks");
            }
            if (!opt.mask->is_all_student()) {
                if (!opt.teacher_bits) throw ContractError("swap mask selects teacher blocks but no teacher bit-width");
                if (*opt.teacher_bits <= opt.bits || !bits_.contains(*opt.teacher_bits)) {
                    throw ContractError("teacher bit-width " + std::to_string(*opt.teacher_bits) +
                                        " must be in the trained set and above the student's " +
                                        std::to_string(opt.bits));
                }
            }
        }
        Shape expect = arch_.input_shape;
        expect.insert(expect.begin(), x.rank() > 0 ? x.dim(0) : 0);
        if (x.shape() != expect) {
            throw DimensionError("network input " + shape_str(x.shape()) + ", expected " + shape_str(expect));
        }

        const int student_bank = opt.bank_bits.value_or(opt.bits);
        Tensor h = x;
        std::size_t block = 0;     // next quantized block index
        std::size_t bn_index = 0;  // next BN layer index
        int prev_bank = student_bank;  // bank of the most recent learnable layer
        bool prev_teacher = false;
        for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
            const LayerDesc& l = arch_.layers[i];
            switch (l.kind) {
                case LayerKind::Dense:
                case LayerKind::Conv: {
                    int exec_bits = opt.bits;
                    int bank = student_bank;
                    bool teacher = false;
                    if (l.quantized) {
                        if (opt.mask && !opt.mask->beta[block]) {
                            exec_bits = *opt.teacher_bits;
                            bank = *opt.teacher_bits;
                            teacher = true;
                        }
                        const Tensor& alpha = alpha_banks_.at(alpha_key(bank))[block];
                        h = quantize_activation(tape, h, alpha, exec_bits);
                        ++block;
                    }
                    Tensor w = effective_weight(tape, i, exec_bits);
                    h = l.kind == LayerKind::Dense ? matmul(tape, h, w) : conv2d(tape, h, w, l.stride, l.padding);
                    if (params_[i].bias.defined()) h = add_bias(tape, h, params_[i].bias);
                    prev_bank = bank;
                    prev_teacher = teacher;
                    break;
                }
                case LayerKind::BatchNorm: {
                    BnEntry& entry = bn_banks_.at(bn_key(prev_bank))[bn_index++];
                    const BnMode mode = opt.phase == Phase::Train   ? BnMode::Train
                                        : opt.phase == Phase::Eval ? BnMode::Eval
                                                                   : BnMode::Collect;
                    h = batchnorm(tape, h, entry, mode, !prev_teacher);
                    break;
                }
                case LayerKind::Relu: h = relu(tape, h); break;
                case LayerKind::MaxPool: h = max_pool2d(tape, h, l.kernel, l.stride); break;
                case LayerKind::Flatten: h = flatten(tape, h); break;
            }
        }
        return h;
    }

    /// Sum over quantized layers of the mean absolute difference between the
    /// weights executed at bi and at bj.
    double model_distance(int bi, int bj) const {
        double total = 0.0;
        for (std::size_t i : arch_.quantized_layers()) {
            const auto wi = quantized_values(i, bi);
            const auto wj = quantized_values(i, bj);
            double s = 0.0;
            for (std::size_t k = 0; k < wi.size(); ++k) s += std::abs(wi[k] - wj[k]);
            total += s / static_cast<double>(wi.size());
        }
        return total;
    }

    // -----------------------------------------------------------------------
    // Parameters

    /// Every trainable tensor with a stable name. Bank entries are named by
    /// the bit-width they are filed under.
    std::vector<NetworkParam> parameters() const {
        std::vector<NetworkParam> out;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].weight.defined())
                out.push_back({"layer" + std::to_string(i) + ".weight", params_[i].weight, ParamKind::Weight});
            if (params_[i].bias.defined())
                out.push_back({"layer" + std::to_string(i) + ".bias", params_[i].bias, ParamKind::Bias});
        }
        for (const auto& [b, bank] : bn_banks_) {
            for (std::size_t k = 0; k < bank.size(); ++k) {
                const std::string base = "bn" + std::to_string(k) + "@" + std::to_string(b);
                out.push_back({base + ".gamma", bank[k].gamma, ParamKind::BnAffine});
                out.push_back({base + ".beta", bank[k].beta, ParamKind::BnAffine});
            }
        }
        for (const auto& [b, bank] : alpha_banks_) {
            for (std::size_t q = 0; q < bank.size(); ++q)
                out.push_back({"alpha" + std::to_string(q) + "@" + std::to_string(b), bank[q], ParamKind::Alpha});
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }

    /// Replaces quantized layers' latent weights with their b1 codes. The
    /// network can still execute at every bit-width but can no longer train.
    void freeze_to_codes() {
        for (std::size_t i : arch_.quantized_layers()) {
            if (params_[i].frozen) continue;
            params_[i].frozen = quantize_weights_dorefa(params_[i].weight, b1());
            params_[i].weight = Tensor();
        }
    }

    bool frozen() const {
        for (std::size_t i : arch_.quantized_layers())
            if (params_[i].frozen) return true;
        return false;
    }

    /// Assembles a network around externally provided state (bundle loading).
    static AdaptiveNetwork assemble(ArchSpec arch, BitWidthSet bits, BankPolicy policy, std::vector<LayerParams> layers,
                                    std::map<int, std::vector<BnEntry>> bn, std::map<int, std::vector<Tensor>> alpha) {
        AdaptiveNetwork n;
        n.shapes_ = arch.validate();
        n.arch_ = std::move(arch);
        n.bits_ = std::move(bits);
        n.policy_ = policy;
        if (layers.size() != n.arch_.layers.size()) throw FormatError("layer count does not match architecture");
        n.params_ = std::move(layers);
        n.bn_banks_ = std::move(bn);
        n.alpha_banks_ = std::move(alpha);
        n.validate_state();
        return n;
    }

    /// Checks parameter and bank shapes against the architecture.
    void validate_state() const {
        Shape in = arch_.input_shape;
        std::vector<std::size_t> bn_channels;
        for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
            const LayerDesc& l = arch_.layers[i];
            const LayerParams& p = params_[i];
            const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
            if (l.learnable()) {
                const Shape want = l.kind == LayerKind::Dense ? Shape{in[0], l.units}
                                                              : Shape{l.units, in[0], l.kernel, l.kernel};
                const Shape got = p.frozen ? p.frozen->shape : p.weight.defined() ? p.weight.shape() : Shape{};
                if (got != want) throw FormatError(where + ": weights " + shape_str(got) + ", expected " + shape_str(want));
                if (p.frozen && !l.quantized) throw FormatError(where + ": codes stored for an unquantized layer");
                if (p.bias.defined() != l.bias || (l.bias && p.bias.numel() != l.units)) {
                    throw FormatError(where + ": bias does not match the architecture");
                }
            } else if (p.weight.defined() || p.bias.defined() || p.frozen) {
                throw FormatError(where + ": carries parameters");
            }
            if (l.kind == LayerKind::BatchNorm) bn_channels.push_back(shapes_[i][0]);
            in = shapes_[i];
        }
        if (!bn_banks_.count(b1()) || !alpha_banks_.count(b1())) {
            throw FormatError("no bank for the stored " + std::to_string(b1()) + "-bit precision");
        }
        for (const auto& [b, bank] : bn_banks_) {
            if (b > b1()) throw FormatError("bank for " + std::to_string(b) + " bits above b1");
            if (bank.size() != bn_channels.size()) throw FormatError("batch-norm bank size mismatch at " + std::to_string(b) + " bits");
            for (std::size_t k = 0; k < bank.size(); ++k) {
                if (bank[k].channels() != bn_channels[k]) throw FormatError("batch-norm channel mismatch at " + std::to_string(b) + " bits");
                for (double v : bank[k].running_var)
                    if (!(v >= 0.0)) throw FormatError("negative running variance at " + std::to_string(b) + " bits");
            }
        }
        for (const auto& [b, bank] : alpha_banks_) {
            if (b > b1()) throw FormatError("clip bank for " + std::to_string(b) + " bits above b1");
            if (bank.size() != num_blocks()) throw FormatError("clip bank size mismatch at " + std::to_string(b) + " bits");
        }
    }

private:
    struct CodeCache {
        std::vector<double> source;
        QuantizedWeightView view;
        std::map<int, std::vector<double>> by_bits;
    };

    static Tensor he_init(Shape shape, std::size_t fan_in, RngStream& rng) {
        Tensor w(std::move(shape));
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& v : w.data()) v = sd * rng.normal();
        w.set_requires_grad();
        return w;
    }

    ArchSpec arch_;
    std::vector<Shape> shapes_;
    BitWidthSet bits_;
    BankPolicy policy_;
    std::vector<LayerParams> params_;
    std::map<int, std::vector<BnEntry>> bn_banks_;
    std::map<int, std::vector<Tensor>> alpha_banks_;
    mutable std::map<std::size_t, CodeCache> code_cache_;
};

}  // namespace aq
