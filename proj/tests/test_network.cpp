#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace aq;
using aqtest::Gen;

namespace {

AdaptiveNetwork make_net(std::vector<int> bits = {8, 4, 2}, BankPolicy policy = {}, std::uint64_t seed = 1) {
    RngStream init(seed, 1);
    return AdaptiveNetwork(make_mlp(4, 12, 3, 3), BitWidthSet(std::move(bits)), policy, 6.0, 0.1, init);
}

Tensor run(AdaptiveNetwork& net, const Tensor& x, int bits, Phase phase = Phase::Eval, const SwapMask* mask = nullptr,
           std::optional<int> teacher = std::nullopt) {
    Tape t;
    ForwardOptions o;
    o.bits = bits;
    o.phase = phase;
    o.mask = mask;
    o.teacher_bits = teacher;
    return net.forward(t, x, o);
}

// Gives every bank entry distinct values so bank mix-ups show up in outputs.
void scramble_banks(AdaptiveNetwork& net, std::uint64_t seed) {
    Gen g(seed);
    for (auto& [b, bank] : net.bn_banks())
        for (auto& e : bank) {
            for (double& v : e.gamma.data()) v = g.uniform(0.5, 1.5);
            for (double& v : e.beta.data()) v = g.uniform(-0.5, 0.5);
            for (double& v : e.running_mean) v = g.uniform(-0.3, 0.3);
            for (double& v : e.running_var) v = g.uniform(0.5, 2.0);
        }
    for (auto& [b, bank] : net.alpha_banks())
        for (auto& a : bank) a.data()[0] = g.uniform(1.0, 4.0);
}

struct BankSnapshot {
    std::map<int, std::vector<std::vector<double>>> values;
    bool operator==(const BankSnapshot&) const = default;
};

BankSnapshot snapshot(const AdaptiveNetwork& net, int b) {
    BankSnapshot s;
    for (const auto& e : net.bn_banks().at(b)) {
        s.values[b].push_back(e.gamma.values());
        s.values[b].push_back(e.beta.values());
        s.values[b].push_back(e.running_mean);
        s.values[b].push_back(e.running_var);
    }
    for (const auto& a : net.alpha_banks().at(b)) s.values[b].push_back(a.values());
    return s;
}

}  // namespace

TEST(Forward, AllStudentMaskEqualsPlainForward) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 2);
    Gen g(3);
    Tensor x = g.tensor({6, 4}, -2, 2, false);
    const SwapMask all = SwapMask::all_student(net.num_blocks());
    EXPECT_EQ(run(net, x, 8).values(), run(net, x, 8, Phase::Eval, &all).values());
}

TEST(Forward, AllTeacherMaskEqualsTeacherForward) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 4);
    // the BN after the unquantized first layer belongs to the student bank; align it
    net.bn_banks().at(2)[0] = net.bn_banks().at(8)[0].deep_copy();
    Gen g(5);
    Tensor x = g.tensor({6, 4}, -2, 2, false);
    SwapMask teacher{std::vector<bool>(net.num_blocks(), false)};
    EXPECT_EQ(run(net, x, 2, Phase::Eval, &teacher, 8).values(), run(net, x, 8).values());
}

TEST(Forward, EvalIsDeterministic) {
    AdaptiveNetwork net = make_net();
    Gen g(6);
    Tensor x = g.tensor({5, 4}, -2, 2, false);
    for (int b : {8, 4, 2}) EXPECT_EQ(run(net, x, b).values(), run(net, x, b).values());
}

TEST(Forward, ContractViolations) {
    AdaptiveNetwork net = make_net();
    Tensor x = Tensor::zeros({2, 4});
    EXPECT_THROW(run(net, x, 9), ContractError);
    SwapMask shorter{std::vector<bool>{true}};
    EXPECT_THROW(run(net, x, 2, Phase::Eval, &shorter, 8), ContractError);
    SwapMask mixed{std::vector<bool>{true, false, true}};
    EXPECT_THROW(run(net, x, 2, Phase::Eval, &mixed), ContractError);
    EXPECT_THROW(run(net, x, 4, Phase::Eval, &mixed, 2), ContractError);
    EXPECT_THROW(run(net, x, 4, Phase::Eval, &mixed, 6), ContractError);
    EXPECT_THROW(run(net, Tensor::zeros({2, 5}), 8), DimensionError);
    EXPECT_THROW(run(net, x, 3), MissingBankError);
}

TEST(Forward, MissingBankNamesBitWidth) {
    AdaptiveNetwork net = make_net();
    try {
        run(net, Tensor::zeros({1, 4}), 3);
        FAIL();
    } catch (const MissingBankError& e) {
        EXPECT_EQ(e.bits(), 3);
        EXPECT_NE(std::string(e.what()).find("3-bit"), std::string::npos);
    }
}

TEST(Forward, SharedBankPolicyRunsEveryBitWidth) {
    AdaptiveNetwork net = make_net({8, 4, 2}, {false, false});
    EXPECT_EQ(net.bn_banks().size(), 1u);
    EXPECT_TRUE(net.has_bank(3));
    EXPECT_NO_THROW(run(net, Tensor::zeros({2, 4}), 3));
}

TEST(ModelDistance, ZeroOnDiagonalAndSymmetric) {
    AdaptiveNetwork net = make_net();
    for (int a : {8, 4, 2}) {
        EXPECT_EQ(net.model_distance(a, a), 0.0);
        for (int b : {8, 4, 2}) EXPECT_EQ(net.model_distance(a, b), net.model_distance(b, a));
    }
}

TEST(ModelDistance, HandToyFromCodes) {
    ArchSpec arch;
    arch.input_shape = {1};
    arch.layers = {{LayerKind::Dense, 1}, {LayerKind::Dense, 2}, {LayerKind::Dense, 1}};
    arch.layers[1].quantized = true;
    RngStream init(0, 1);
    AdaptiveNetwork net(arch, BitWidthSet({8, 4, 2}), {}, 6.0, 0.1, init);
    // codes 204, 102 -> 8-bit [0.6, -0.2], mean 0.2
    // 4-bit codes 12, 6 -> [0.6, -0.2]; 2-bit codes 3, 1 -> [1, -1/3] shifted by -2/15 -> [13/15, -7/15]
    net.layers()[1].frozen = QuantizedWeightView{{1, 2}, {204, 102}, 8, 0.2};
    net.layers()[1].weight = Tensor();
    EXPECT_NEAR(net.model_distance(8, 4), 0.0, 1e-15);
    EXPECT_NEAR(net.model_distance(8, 2), 4.0 / 15.0, 1e-12);
}

TEST(ModelDistance, IsMeanAbsoluteDifferenceSummedOverLayers) {
    AdaptiveNetwork net = make_net();
    double want = 0.0;
    for (std::size_t i : net.arch().quantized_layers()) {
        const auto a = net.quantized_values(i, 8), b = net.quantized_values(i, 2);
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
        want += s / static_cast<double>(a.size());
    }
    EXPECT_NEAR(net.model_distance(8, 2), want, 1e-12);
}

TEST(WeightSharing, MutatingLatentChangesEveryBitWidth) {
    AdaptiveNetwork net = make_net();
    Gen g(7);
    Tensor x = g.tensor({8, 4}, -2, 2, false);
    std::map<int, std::vector<double>> before;
    for (int b : {8, 4, 2}) before[b] = run(net, x, b).values();
    const std::size_t q = net.arch().quantized_layers()[1];
    for (double& v : net.layers()[q].weight.data()) v = -v * 1.7 + 0.05;
    for (int b : {8, 4, 2}) EXPECT_NE(run(net, x, b).values(), before[b]) << b;
}

TEST(Bypass, FirstAndLastLayersUnquantized) {
    AdaptiveNetwork net = make_net();
    const std::size_t first = 0, last = net.arch().layers.size() - 1;
    for (std::size_t i : {first, last}) {
        Tape t;
        EXPECT_EQ(net.effective_weight(t, i, 2).values(), net.effective_weight(t, i, 8).values());
        EXPECT_TRUE(net.effective_weight(t, i, 2).same_storage(net.layers()[i].weight));
    }
    ArchSpec bad = make_mlp(4, 8, 1, 2);
    bad.layers[0].quantized = true;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(BnIsolation, TrainForwardTouchesOnlyItsBank) {
    AdaptiveNetwork net = make_net();
    Gen g(8);
    Tensor x = g.tensor({16, 4}, -2, 2, false);
    const auto s8 = snapshot(net, 8), s2 = snapshot(net, 2), s4 = snapshot(net, 4);
    run(net, x, 4, Phase::Train);
    EXPECT_EQ(snapshot(net, 8), s8);
    EXPECT_EQ(snapshot(net, 2), s2);
    EXPECT_NE(snapshot(net, 4), s4);
}

TEST(BnIsolation, SwappedTeacherBlocksDoNotUpdateTeacherStats) {
    AdaptiveNetwork net = make_net();
    Gen g(9);
    Tensor x = g.tensor({16, 4}, -2, 2, false);
    const auto s8 = snapshot(net, 8);
    SwapMask teacher{std::vector<bool>(net.num_blocks(), false)};
    run(net, x, 2, Phase::Train, &teacher, 8);
    EXPECT_EQ(snapshot(net, 8), s8);
}

TEST(BnIsolation, CalibrationTouchesOnlyTargetBank) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 10);
    const TrainTest data = gen_synthetic_blobs([] {
        DatasetSpec s;
        s.classes = 3;
        s.samples = 120;
        s.dim = 4;
        return s;
    }());
    std::map<int, BankSnapshot> before;
    for (int b : {8, 4, 2}) before[b] = snapshot(net, b);
    std::vector<std::vector<double>> weights;
    for (const auto& p : net.layers()) weights.push_back(p.weight.defined() ? p.weight.values() : std::vector<double>{});
    calibrate_bn(net, 3, data.train, 32);
    ASSERT_TRUE(net.bn_banks().count(3));
    for (int b : {8, 4, 2}) EXPECT_EQ(snapshot(net, b), before[b]);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (net.layers()[i].weight.defined()) {
            EXPECT_EQ(net.layers()[i].weight.values(), weights[i]);
        }
    }
    calibrate_bn(net, 4, data.train, 32);
    EXPECT_EQ(snapshot(net, 8), before[8]);
    EXPECT_EQ(snapshot(net, 2), before[2]);
}

TEST(Banks, AddBankCopiesNearestAndIsIndependent) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 11);
    net.add_bank(3, 4);
    EXPECT_EQ(snapshot(net, 3).values.at(3), snapshot(net, 4).values.at(4));
    net.bn_banks().at(3)[0].gamma.data()[0] = 99.0;
    EXPECT_NE(net.bn_banks().at(4)[0].gamma[0], 99.0);
    EXPECT_THROW(net.add_bank(9, 8), ConfigError);
    EXPECT_EQ(net.executable_bits(), (std::vector<int>{8, 4, 3, 2}));
}

TEST(Banks, NearestTrainedRoundsUpOnTies) {
    const BitWidthSet b({8, 4, 2});
    EXPECT_EQ(nearest_trained(3, b), 4);
    EXPECT_EQ(nearest_trained(6, b), 8);
    EXPECT_EQ(nearest_trained(5, b), 4);
    EXPECT_EQ(nearest_trained(7, b), 8);
}

TEST(Banks, BitWidthSetValidation) {
    EXPECT_THROW(BitWidthSet(std::vector<int>{}), ConfigError);
    EXPECT_THROW(BitWidthSet({8, 8}), ConfigError);
    EXPECT_THROW(BitWidthSet({8, 1}), ConfigError);
    EXPECT_EQ(BitWidthSet({2, 8, 4}).bits(), (std::vector<int>{8, 4, 2}));
}

TEST(Frozen, CodesReproduceLatentForward) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 12);
    AdaptiveNetwork frozen = net;
    frozen.freeze_to_codes();
    EXPECT_TRUE(frozen.frozen());
    Gen g(13);
    Tensor x = g.tensor({7, 4}, -2, 2, false);
    for (int b : {8, 4, 2}) {
        const auto a = run(net, x, b).values(), c = run(frozen, x, b).values();
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], c[i], 1e-12);
    }
}

TEST(Frozen, ConvNetworkRuns) {
    ArchSpec a;
    a.input_shape = {1, 6, 6};
    LayerDesc c1{LayerKind::Conv, 3, 3};
    c1.padding = 1;
    LayerDesc c2{LayerKind::Conv, 4, 3};
    c2.quantized = true;
    a.layers = {c1, {LayerKind::BatchNorm}, {LayerKind::Relu}, c2, {LayerKind::BatchNorm}, {LayerKind::MaxPool, 0, 2, 2},
                {LayerKind::Flatten}, {LayerKind::Dense, 3}};
    RngStream init(3, 1);
    AdaptiveNetwork net(a, BitWidthSet({8, 2}), {}, 6.0, 0.1, init);
    Gen g(14);
    Tensor x = g.tensor({2, 1, 6, 6}, -1, 1, false);
    EXPECT_EQ(run(net, x, 2, Phase::Train).shape(), (Shape{2, 3}));
    EXPECT_EQ(run(net, x, 8).shape(), (Shape{2, 3}));
}

// ---------------------------------------------------------------------------

TEST(Bundle, RoundTripMatchesInMemoryEval) {
    AdaptiveNetwork net = make_net();
    scramble_banks(net, 15);
    BundleStats st;
    const auto bytes = serialize_bundle(net, &st);
    AdaptiveNetwork loaded = parse_bundle(bytes, "bundle");
    Gen g(16);
    Tensor x = g.tensor({9, 4}, -2, 2, false);
    for (int b : {8, 4, 2}) {
        const auto a = run(net, x, b).values(), c = run(loaded, x, b).values();
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], c[i], 1e-9);
    }
    AdaptiveNetwork frozen = net;
    frozen.freeze_to_codes();
    for (std::size_t i : net.arch().quantized_layers())
        EXPECT_EQ(loaded.layers()[i].frozen->codes, frozen.layers()[i].frozen->codes);
    EXPECT_LE(st.payload_ratio(), 0.25);
    EXPECT_EQ(st.total_bytes, bytes.size());
}

TEST(Bundle, CorruptionIsDetected) {
    AdaptiveNetwork net = make_net();
    auto bytes = serialize_bundle(net);
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(parse_bundle(flipped, "bundle"), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 9);
    EXPECT_THROW(parse_bundle(truncated, "bundle"), FormatError);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(parse_bundle(magic, "bundle"), FormatError);
}

TEST(Bundle, CalibratedBanksAreExported) {
    AdaptiveNetwork net = make_net();
    net.add_bank(3, 4);
    AdaptiveNetwork loaded = parse_bundle(serialize_bundle(net), "bundle");
    EXPECT_TRUE(loaded.bn_banks().count(3));
    Tensor x = Tensor::ones({2, 4});
    const auto a = run(net, x, 3).values(), c = run(loaded, x, 3).values();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], c[i], 1e-9);
}
