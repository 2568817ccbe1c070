#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace aq;
using aqtest::Gen;
using aqtest::tiny_config;

namespace {

std::vector<std::vector<double>> all_params(const AdaptiveNetwork& net) {
    std::vector<std::vector<double>> out;
    for (const auto& p : net.parameters()) out.push_back(p.tensor.values());
    for (const auto& [b, bank] : net.bn_banks())
        for (const auto& e : bank) {
            out.push_back(e.running_mean);
            out.push_back(e.running_var);
        }
    return out;
}

struct RunOutput {
    std::vector<MetricsRow> rows;
    std::vector<EpochRecord> epochs;
    std::vector<std::vector<double>> params;
};

RunOutput train(const RunConfig& c) {
    Trainer t(c, load_dataset(c.dataset));
    RunOutput out;
    t.set_row_sink([&](const MetricsRow& r) { out.rows.push_back(r); });
    out.epochs = t.run();
    out.params = all_params(t.network());
    return out;
}

bool same_rows(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].bits != b[i].bits || a[i].loss != b[i].loss || a[i].ce != b[i].ce || a[i].kl != b[i].kl ||
            a[i].teacher_bits != b[i].teacher_bits)
            return false;
    }
    return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Teacher selection

TEST(Entropy, ClosedForms) {
    std::vector<double> onehot(10, 0.0), uniform(10, 0.1);
    onehot[2] = 1.0;
    EXPECT_EQ(entropy(Tensor({1, 10}, onehot)), 0.0);
    EXPECT_NEAR(entropy(Tensor({1, 10}, uniform)), std::log(10.0), 1e-12);
    std::vector<double> both = onehot;
    both.insert(both.end(), uniform.begin(), uniform.end());
    EXPECT_NEAR(entropy(Tensor({2, 10}, both)), 1.151293, 1e-6);
}

TEST(SelectTeacher, HandExample) {
    std::vector<TeacherCandidate> c{{8, 0.5, 0.2}, {6, 0.7, 0.05}};
    const TeacherChoice t = select_teacher(4, c, 2.0);
    EXPECT_EQ(t.teacher_bits, 6);
    EXPECT_NEAR(t.score, 0.8, 1e-12);
    EXPECT_EQ(t.entropy_term, 0.7);
    EXPECT_EQ(t.distance_term, 0.05);
}

TEST(SelectTeacher, LambdaZeroUsesEntropyOnly) {
    std::vector<TeacherCandidate> c{{8, 0.9, 0.0}, {6, 0.3, 5.0}, {4, 0.6, 0.0}};
    EXPECT_EQ(select_teacher(2, c, 0.0).teacher_bits, 6);
}

TEST(SelectTeacher, HugeLambdaUsesDistanceOnly) {
    Gen g(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<TeacherCandidate> c;
        for (int b : {8, 6, 4}) c.push_back({b, g.uniform(0, 2), g.uniform(0.01, 1)});
        std::size_t best = 0;
        for (std::size_t i = 1; i < c.size(); ++i)
            if (c[i].distance < c[best].distance) best = i;
        EXPECT_EQ(select_teacher(2, c, 1e9).teacher_bits, c[best].bits);
    }
}

TEST(SelectTeacher, TiesGoToHigherBits) {
    std::vector<TeacherCandidate> c{{6, 0.5, 0.1}, {8, 0.5, 0.1}};
    EXPECT_EQ(select_teacher(4, c, 1.0).teacher_bits, 8);
}

TEST(SelectTeacher, RejectsIllegalCandidates) {
    EXPECT_THROW(select_teacher(8, {}, 0.1), ContractError);
    std::vector<TeacherCandidate> c{{4, 0.1, 0.1}};
    EXPECT_THROW(select_teacher(4, c, 0.1), ContractError);
}

TEST(Histogram, PreferenceShiftIsRepresented) {
    // the 6-bit candidate's entropy drops below the 8-bit one's halfway through
    TeacherHistogram h;
    for (int epoch = 0; epoch < 10; ++epoch) {
        EpochRecord e;
        e.epoch = epoch;
        for (int batch = 0; batch < 5; ++batch) {
            std::vector<TeacherCandidate> c{{8, 0.5, 0.0}, {6, 0.9 - 0.08 * epoch, 0.0}};
            ++e.teacher_counts[{4, select_teacher(4, c, 0.1).teacher_bits}];
        }
        accumulate(h, e);
    }
    EXPECT_EQ((h[{0, 4, 8}]), 5u);
    EXPECT_EQ((h[{9, 4, 6}]), 5u);
    EXPECT_EQ((h.count({0, 4, 6})), 0u);
    const std::string csv = histogram_csv(h);
    EXPECT_NE(csv.find("9,4,6,5"), std::string::npos);
    EXPECT_NE(csv.find("0,4,8,5"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Swapping

TEST(Swap, ProbabilityExamples) {
    EXPECT_NEAR(swap_probability(5, 5, 0.4), 0.8, 1e-15);
    EXPECT_NEAR(swap_probability(1, 5, 0.4), 0.48, 1e-15);
    EXPECT_EQ(swap_probability(3, 4, 0.9), 1.0);
}

TEST(Swap, FullProbabilityGivesAllStudent) {
    RngStream rng(1, 2);
    for (int i = 0; i < 1000; ++i) EXPECT_TRUE(sample_swap_mask(7, 1.0, rng).is_all_student());
}

TEST(Swap, FrequenciesWithinBinomialBounds) {
    RngStream rng(3, 4);
    const std::size_t L = 6, n = 20000;
    std::vector<std::size_t> hits(L, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const SwapMask m = sample_swap_mask(L, 0.3, rng);
        for (std::size_t l = 0; l < L; ++l) hits[l] += m.beta[l] ? 1 : 0;
    }
    for (std::size_t l = 0; l < L; ++l) {
        const double p = swap_probability(l + 1, L, 0.3);
        const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
        EXPECT_LE(std::abs(static_cast<double>(hits[l]) / n - p), 3 * sigma) << "block " << l + 1;
    }
}

TEST(Swap, InvalidP1Throws) {
    RngStream rng(0, 0);
    EXPECT_THROW(sample_swap_mask(3, 0.0, rng), ContractError);
    EXPECT_THROW(sample_swap_mask(3, 1.5, rng), ContractError);
}

TEST(Swap, CurriculumEndsAtOne) {
    EXPECT_EQ(p1_at(0, 10, 0.5), 0.5);
    EXPECT_NEAR(p1_at(3, 10, 0.5), 0.5 + 0.5 * 3.0 / 9.0, 1e-15);
    EXPECT_EQ(p1_at(9, 10, 0.5), 1.0);
    EXPECT_EQ(p1_at(0, 1, 0.5), 1.0);
}

// ---------------------------------------------------------------------------
// Losses

TEST(LossForBit, NoTeacherMeansPureCrossEntropy) {
    Gen g(5);
    Tensor logits = g.tensor({4, 3}, -2, 2);
    std::vector<int> y{0, 1, 2, 1};
    Tape t;
    const BitLoss l = loss_for_bit(t, logits, y, std::nullopt);
    EXPECT_EQ(l.kl, 0.0);
    EXPECT_EQ(l.total.item(), l.ce);
}

TEST(LossForBit, SelfTeacherHasZeroKl) {
    Gen g(6);
    Tensor logits = g.tensor({4, 3}, -2, 2);
    std::vector<int> y{0, 1, 2, 1};
    Tape t;
    EXPECT_NEAR(loss_for_bit(t, logits, y, probabilities(logits)).kl, 0.0, 1e-12);
}

TEST(LossForBit, ThreeClassToy) {
    Tensor student({1, 3}, {std::log(0.5), std::log(0.3), std::log(0.2)});
    Tensor teacher({1, 3}, {0.7, 0.2, 0.1});
    std::vector<int> y{0};
    Tape t;
    const BitLoss l = loss_for_bit(t, student, y, teacher);
    EXPECT_NEAR(l.ce, 0.693147, 1e-6);
    const double kl = 0.7 * std::log(0.7 / 0.5) + 0.2 * std::log(0.2 / 0.3) + 0.1 * std::log(0.1 / 0.2);
    EXPECT_NEAR(l.kl, kl, 1e-12);
    EXPECT_NEAR(l.kl, 0.085124, 2e-6);
    EXPECT_NEAR(l.total.item(), l.ce + l.kl, 1e-15);
}

TEST(LossForBit, TeacherReceivesNoGradient) {
    Gen g(7);
    Tensor student = g.tensor({3, 4}, -2, 2), teacher_logits = g.tensor({3, 4}, -2, 2);
    std::vector<int> y{0, 1, 3};
    Tape t;
    Tensor teacher_probs = softmax(t, teacher_logits);
    const BitLoss l = loss_for_bit(t, student, y, teacher_probs);
    t.backward(l.total);
    EXPECT_TRUE(student.has_grad());
    EXPECT_FALSE(teacher_logits.has_grad());
}

TEST(DeltaB, Examples) {
    EXPECT_EQ(delta_b({{8, 91.0}, {4, 90.0}}, {{8, 91.0}, {4, 90.0}}), 100.0);
    EXPECT_NEAR(delta_b({{8, 90.0}, {2, 45.0}}, {{8, 90.0}, {2, 90.0}}), 75.0, 1e-12);
    EXPECT_NEAR(delta_b({{8, 45.0}, {2, 22.5}}, {{8, 90.0}, {2, 90.0}}), 37.5, 1e-12);
    EXPECT_THROW(delta_b({{8, 90.0}}, {{4, 90.0}}), ContractError);
    EXPECT_THROW(delta_b({{8, 90.0}}, {{8, 0.0}}), ContractError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, ConstantLogitsGiveMajorityFrequency) {
    RunConfig c = tiny_config();
    RngStream init(0, 1);
    AdaptiveNetwork net(c.arch, c.bit_set(), c.bank_policy(), 6.0, 0.1, init);
    auto& last = net.layers().back();
    std::fill(last.weight.data().begin(), last.weight.data().end(), 0.0);
    last.bias.data()[0] = 0.0;
    last.bias.data()[1] = 1.0;
    last.bias.data()[2] = 0.0;
    Dataset d;
    d.sample_shape = {4};
    d.num_classes = 3;
    const std::vector<int> labels{1, 1, 1, 0, 2, 1, 0, 1};
    for (int y : labels) {
        d.labels.push_back(y);
        for (int k = 0; k < 4; ++k) d.features.push_back(0.1 * y + k);
    }
    EXPECT_NEAR(evaluate(net, 4, d, 3), 62.5, 1e-12);
}

TEST(Evaluate, InvariantToBatchSize) {
    RunConfig c = tiny_config();
    Trainer t(c, load_dataset(c.dataset));
    t.train_epoch();
    for (int b : {8, 4, 2}) {
        const double ref = evaluate(t.network(), b, t.data().test, 256);
        for (std::size_t bs : {1u, 7u, 64u, 1000u}) EXPECT_EQ(evaluate(t.network(), b, t.data().test, bs), ref);
    }
}

TEST(Evaluate, EmptyDataGivesZeroAndMissingBankThrows) {
    RunConfig c = tiny_config();
    Trainer t(c, load_dataset(c.dataset));
    Dataset empty;
    empty.sample_shape = {4};
    EXPECT_EQ(evaluate(t.network(), 8, empty, 4), 0.0);
    EXPECT_THROW(evaluate(t.network(), 3, t.data().test, 4), MissingBankError);
}

// ---------------------------------------------------------------------------
// Training

TEST(Trainer, GradientAccumulationEquivalence) {
    RunConfig c = tiny_config(Mode::Joint);
    const TrainTest data = load_dataset(c.dataset);
    RngStream init_a(5, 1), init_b(5, 1);
    AdaptiveNetwork a(c.arch, c.bit_set(), c.bank_policy(), 6.0, 0.1, init_a);
    AdaptiveNetwork b(c.arch, c.bit_set(), c.bank_policy(), 6.0, 0.1, init_b);
    BatchIterator it(data.train, 32);
    const Batch batch = *it.next();
    ForwardOptions o;
    o.phase = Phase::Train;
    {
        Tape tape;
        std::optional<Tensor> total;
        for (int bits : c.bits) {
            o.bits = bits;
            Tensor l = loss_for_bit(tape, a.forward(tape, batch.x, o), batch.y, std::nullopt).total;
            total = total ? add(tape, *total, l) : l;
        }
        tape.backward(*total);
    }
    for (int bits : c.bits) {
        Tape tape;
        o.bits = bits;
        tape.backward(loss_for_bit(tape, b.forward(tape, batch.x, o), batch.y, std::nullopt).total);
    }
    const auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i].tensor.has_grad(), pb[i].tensor.has_grad()) << pa[i].name;
        for (std::size_t k = 0; k < pa[i].tensor.grad().size(); ++k)
            EXPECT_NEAR(pa[i].tensor.grad()[k], pb[i].tensor.grad()[k], 1e-9) << pa[i].name;
    }
}

TEST(Trainer, CoquantWithOneBitWidthIsIndividual) {
    const RunOutput a = train(tiny_config(Mode::CoQuant, {8}));
    const RunOutput b = train(tiny_config(Mode::Individual, {8}, 8));
    EXPECT_TRUE(same_rows(a.rows, b.rows));
    EXPECT_EQ(a.params, b.params);
    for (const auto& r : a.rows) {
        EXPECT_FALSE(r.teacher_bits);
        EXPECT_EQ(r.kl, 0.0);
    }
}

TEST(Trainer, SingleBitModesCoincide) {
    const RunOutput ind = train(tiny_config(Mode::Individual, {4}, 4));
    for (Mode m : {Mode::AdaBits, Mode::SwitchableBn, Mode::ProgressiveDesc, Mode::ProgressiveAsc}) {
        const RunOutput o = train(tiny_config(m, {4}));
        EXPECT_TRUE(same_rows(o.rows, ind.rows));
        EXPECT_EQ(o.params, ind.params);
    }
}

TEST(Trainer, DeterministicReruns) {
    for (Mode m : {Mode::CoQuant, Mode::Joint}) {
        const RunOutput a = train(tiny_config(m)), b = train(tiny_config(m));
        EXPECT_TRUE(same_rows(a.rows, b.rows));
        EXPECT_EQ(a.params, b.params);
    }
}

TEST(Trainer, SeedsChangeTrajectories) {
    RunConfig c = tiny_config();
    c.epochs = 1;
    const RunOutput a = train(c);
    c.seed = 9;
    EXPECT_NE(train(c).params, a.params);
}

TEST(Trainer, TeacherLegalityAndTerminalMasks) {
    RunConfig c = tiny_config(Mode::CoQuant, {8, 6, 4, 2});
    c.epochs = 4;
    const RunOutput o = train(c);
    std::size_t distilled = 0;
    for (const auto& r : o.rows) {
        if (r.bits == 8) {
            EXPECT_FALSE(r.teacher_bits);
            EXPECT_EQ(r.kl, 0.0);
            continue;
        }
        ASSERT_TRUE(r.teacher_bits);
        EXPECT_GT(*r.teacher_bits, r.bits);
        EXPECT_TRUE(c.bit_set().contains(*r.teacher_bits));
        if (r.bits == 6) {
            EXPECT_EQ(*r.teacher_bits, 8);
        }
        if (r.epoch == c.epochs - 1) {
            EXPECT_EQ(r.swap_student_fraction, 1.0);
        }
        ++distilled;
    }
    EXPECT_GT(distilled, 0u);
    std::size_t counted = 0;
    for (const auto& e : o.epochs)
        for (const auto& [k, n] : e.teacher_counts) counted += n;
    EXPECT_EQ(counted, distilled);
}

TEST(Trainer, LoggedDistanceMatchesPreStepNetwork) {
    RunConfig c = tiny_config(Mode::CoQuant, {8, 6, 4, 2});
    c.epochs = 1;
    Trainer t(c, load_dataset(c.dataset));
    std::map<std::pair<int, int>, double> distance;
    for (int a : c.bits)
        for (int b : c.bits) distance[{a, b}] = t.network().model_distance(a, b);
    std::vector<MetricsRow> rows;
    t.set_row_sink([&](const MetricsRow& r) {
        if (r.batch == 0) rows.push_back(r);
    });
    t.train_epoch();
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t k = 1; k < rows.size(); ++k) {
        ASSERT_TRUE(rows[k].teacher_bits);
        EXPECT_EQ(rows[k].distance_term, (distance[{*rows[k].teacher_bits, rows[k].bits}]));
        EXPECT_GE(rows[k].entropy_term, 0.0);
        EXPECT_LE(rows[k].entropy_term, std::log(3.0) + 1e-12);
    }
}

TEST(Trainer, ProgressiveOrderAndScheduleRestart) {
    RunConfig c = tiny_config(Mode::ProgressiveAsc, {8, 4, 2});
    c.epochs = 4;
    Trainer t(c, load_dataset(c.dataset));
    EXPECT_EQ(t.active_bits(0), (std::vector<int>{2}));
    EXPECT_EQ(t.active_bits(4), (std::vector<int>{4}));
    EXPECT_EQ(t.active_bits(11), (std::vector<int>{8}));
    EXPECT_EQ(t.lr_scale(4), 1.0);
    EXPECT_NEAR(t.lr_scale(6), 0.1, 1e-15);
    EXPECT_EQ(c.total_epochs(), 12);
    c.mode = Mode::ProgressiveDesc;
    Trainer d(c, load_dataset(c.dataset));
    EXPECT_EQ(d.active_bits(0), (std::vector<int>{8}));
    EXPECT_EQ(d.active_bits(11), (std::vector<int>{2}));
}

TEST(Trainer, DirectModeTrainsOnlyItsBitWidth) {
    RunConfig c = tiny_config(Mode::Direct, {8}, 8);
    c.epochs = 1;
    const RunOutput o = train(c);
    for (const auto& r : o.rows) EXPECT_EQ(r.bits, 8);
}

TEST(Trainer, NonFiniteLossReportsLocation) {
    RunConfig c = tiny_config();
    Trainer t(c, load_dataset(c.dataset));
    t.network().layers()[0].weight.data()[0] = std::nan("");
    try {
        t.train_epoch();
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
    }
}

TEST(Trainer, DatasetMismatchIsRejected) {
    RunConfig c = tiny_config();
    c.dataset.dim = 5;
    EXPECT_THROW(Trainer(c, load_dataset(c.dataset)), ConfigError);
    RunConfig d = tiny_config();
    d.dataset.classes = 4;
    EXPECT_THROW(Trainer(d, load_dataset(d.dataset)), ConfigError);
}

TEST(Trainer, FinishedTrainerRefusesMoreEpochs) {
    RunConfig c = tiny_config();
    c.epochs = 1;
    Trainer t(c, load_dataset(c.dataset));
    t.run();
    EXPECT_TRUE(t.finished());
    EXPECT_THROW(t.train_epoch(), ContractError);
}

// ---------------------------------------------------------------------------
// Calibration

TEST(Calibrate, SelfConsistentOnTrainedBitWidth) {
    RunConfig c = aqtest::desk_config();
    Trainer t(c, load_dataset(c.dataset));
    t.run();
    for (int b : {8, 4, 2}) {
        const double before = evaluate(t.network(), b, t.data().test, 256);
        calibrate_bn(t.network(), b, t.data().train, c.batch_size);
        EXPECT_LE(std::abs(evaluate(t.network(), b, t.data().test, 256) - before), 0.5) << b;
    }
}

TEST(Calibrate, NewBankWithoutTouchingWeights) {
    RunConfig c = tiny_config();
    c.epochs = 1;
    Trainer t(c, load_dataset(c.dataset));
    t.run();
    std::vector<std::vector<double>> weights;
    for (const auto& p : t.network().layers())
        if (p.weight.defined()) weights.push_back(p.weight.values());
    EXPECT_FALSE(t.network().bn_banks().count(3));
    calibrate_bn(t.network(), 3, t.data().train, 32, 7);
    EXPECT_TRUE(t.network().bn_banks().count(3));
    EXPECT_GT(t.network().bn_banks().at(3)[0].calib_batches, 0u);
    std::size_t k = 0;
    for (const auto& p : t.network().layers())
        if (p.weight.defined()) {
            EXPECT_EQ(p.weight.values(), weights[k++]);
        }
    EXPECT_GT(evaluate(t.network(), 3, t.data().test, 256), 0.0);
}

TEST(Calibrate, EmptyDataThrows) {
    RunConfig c = tiny_config();
    Trainer t(c, load_dataset(c.dataset));
    Dataset empty;
    empty.sample_shape = {4};
    EXPECT_THROW(calibrate_bn(t.network(), 3, empty, 8), ContractError);
}
