#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aq/config.hpp"
#include "aq/dataset.hpp"
#include "aq/network.hpp"
#include "aq/ops.hpp"
#include "aq/optim.hpp"
#include "aq/rng.hpp"

namespace aq {

// ---------------------------------------------------------------------------
// Teacher selection

/// Mean over rows of -sum_i p_i ln p_i, with 0 ln 0 = 0.
inline double entropy(const Tensor& probs) {
    const std::size_t cols = probs.shape().back();
    const std::size_t rows = probs.numel() / cols;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double p = probs[r * cols + j];
            if (p > 0.0) h -= p * std::log(std::max(p, kLogEps));
        }
        total += h;
    }
    return total / static_cast<double>(rows);
}

/// Row-wise softmax outside of any tape.
inline Tensor probabilities(const Tensor& logits) {
    Tape scratch;
    return softmax(scratch, logits.detach());
}

struct TeacherCandidate {
    int bits = 0;
    double entropy = 0.0;   // entropy of this precision's soft logits on the batch
    double distance = 0.0;  // model distance to the student precision
};

struct TeacherChoice {
    int student_bits = 0;
    int teacher_bits = 0;
    double entropy_term = 0.0;
    double distance_term = 0.0;
    double lambda = 0.0;
    double score = 0.0;
    int epoch = 0;
    std::size_t batch_index = 0;
};

/// argmin over candidates of entropy + lambda * distance. Equal scores go to
/// the higher bit-width.
inline TeacherChoice select_teacher(int student_bits, std::span<const TeacherCandidate> candidates, double lambda) {
    if (candidates.empty()) {
        throw ContractError("select_teacher: " + std::to_string(student_bits) +
                            "-bit student has no higher-precision candidate");
    }
    const TeacherCandidate* best = nullptr;
    double best_score = 0.0;
    for (const auto& c : candidates) {
        if (c.bits <= student_bits) {
            throw ContractError("select_teacher: candidate " + std::to_string(c.bits) + " bits is not above the " +
                                std::to_string(student_bits) + "-bit student");
        }
        const double s = c.entropy + lambda * c.distance;
        if (!best || s < best_score || (s == best_score && c.bits > best->bits)) {
            best = &c;
            best_score = s;
        }
    }
    TeacherChoice out;
    out.student_bits = student_bits;
    out.teacher_bits = best->bits;
    out.entropy_term = best->entropy;
    out.distance_term = best->distance;
    out.lambda = lambda;
    out.score = best_score;
    return out;
}

// ---------------------------------------------------------------------------
// Block swapping

/// Probability that block l (1-based, of L) runs as the student.
inline double swap_probability(std::size_t l, std::size_t L, double p1) {
    return std::min(1.0, (1.0 + static_cast<double>(l) / static_cast<double>(L)) * p1);
}

inline SwapMask sample_swap_mask(std::size_t L, double p1, RngStream& rng) {
    if (!(p1 > 0.0 && p1 <= 1.0)) throw ContractError("sample_swap_mask: p1 must be in (0, 1]");
    SwapMask m;
    m.beta.resize(L);
    for (std::size_t l = 1; l <= L; ++l) m.beta[l - 1] = rng.bernoulli(swap_probability(l, L, p1));
    return m;
}

/// Linear curriculum from p1_initial at the first epoch to exactly 1 at the last.
inline double p1_at(int epoch, int epochs, double p1_initial) {
    if (epochs <= 1 || epoch >= epochs - 1) return 1.0;
    return p1_initial + (1.0 - p1_initial) * static_cast<double>(epoch) / static_cast<double>(epochs - 1);
}

// ---------------------------------------------------------------------------
// Losses

struct BitLoss {
    Tensor total;
    double ce = 0.0;
    double kl = 0.0;
};

/// CE(student, label) + KL(teacher || student). The teacher distribution is a
/// constant: no gradient flows into whatever produced it. Without a teacher
/// the KL part is exactly zero.
inline BitLoss loss_for_bit(Tape& tape, const Tensor& logits, std::span<const int> labels,
                            const std::optional<Tensor>& teacher_probs) {
    BitLoss out;
    Tensor ce = cross_entropy_logits(tape, logits, labels);
    out.ce = ce.item();
    if (teacher_probs) {
        Tensor kl = kl_div_logits(tape, *teacher_probs, logits);
        out.kl = kl.item();
        out.total = add(tape, ce, kl);
    } else {
        out.total = ce;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation and calibration

/// Top-1 accuracy in percent of an eval-mode forward at `bits`. `bank_bits`
/// runs with another precision's BN/clip bank (direct execution).
inline double evaluate(AdaptiveNetwork& net, int bits, const Dataset& data, std::size_t batch_size,
                       std::optional<int> bank_bits = std::nullopt) {
    if (data.size() == 0) return 0.0;
    if (!bank_bits && !net.has_bank(bits)) throw MissingBankError(bits);
    BatchIterator it(data, batch_size);
    std::size_t correct = 0;
    ForwardOptions opt;
    opt.bits = bits;
    opt.phase = Phase::Eval;
    opt.bank_bits = bank_bits;
    while (auto batch = it.next()) {
        Tape tape;
        const Tensor logits = net.forward(tape, batch->x, opt);
        const std::size_t cols = logits.shape().back();
        for (std::size_t r = 0; r < batch->y.size(); ++r) {
            const auto row = logits.data().subspan(r * cols, cols);
            const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            if (pred == batch->y[r]) ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Trained bit-width nearest to b; ties go to the larger one.
inline int nearest_trained(int b, const BitWidthSet& trained) {
    int best = trained[0];
    for (int t : trained) {
        const int d = std::abs(t - b), bd = std::abs(best - b);
        if (d < bd || (d == bd && t > best)) best = t;
    }
    return best;
}

/// Re-estimates the BN running statistics for bit-width b from `data` with all
/// weights, affine parameters and clip values frozen. A bit-width without its
/// own bank gets one, copied from the nearest trained bit-width. Batches are
/// drawn in a seeded random order.
inline void calibrate_bn(AdaptiveNetwork& net, int b, const Dataset& data, std::size_t batch_size,
                         std::uint64_t seed = 0) {
    if (data.size() == 0) throw ContractError("calibrate_bn: empty calibration set");
    check_bits(b);
    if (!net.bn_banks().count(b)) {
        const int source = net.has_bank(b) ? b : nearest_trained(b, net.bits());
        net.add_bank(b, source);
    }
    for (auto& e : net.bn_banks().at(b)) e.reset_stats();
    ForwardOptions opt;
    opt.bits = b;
    opt.phase = Phase::Collect;
    auto order = BatchIterator::identity_order(data.size());
    make_stream(seed, Stream::Data).shuffle(order);
    BatchIterator it(data, std::move(order), batch_size);
    while (auto batch = it.next()) {
        Tape tape;
        (void)net.forward(tape, batch->x, opt);
    }
}

/// Mean over bit-widths of metric / reference, in percent.
inline double delta_b(const std::map<int, double>& metrics, const std::map<int, double>& reference) {
    if (metrics.empty() || metrics.size() != reference.size()) {
        throw ContractError("delta_b: metrics and reference must cover the same bit-widths");
    }
    double s = 0.0;
    for (const auto& [b, m] : metrics) {
        auto it = reference.find(b);
        if (it == reference.end()) throw ContractError("delta_b: no reference for " + std::to_string(b) + " bits");
        if (!(it->second > 0.0)) throw ContractError("delta_b: reference for " + std::to_string(b) + " bits is zero");
        s += m / it->second;
    }
    return 100.0 * s / static_cast<double>(metrics.size());
}

// ---------------------------------------------------------------------------
// Training loop

/// One line of the per-batch metrics stream.
struct MetricsRow {
    int epoch = 0;
    std::size_t batch = 0;
    std::string mode;
    int bits = 0;
    double loss = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    std::optional<int> teacher_bits;
    double entropy_term = 0.0;
    double distance_term = 0.0;
    double swap_student_fraction = 1.0;
};

/// Per-epoch summary.
struct EpochRecord {
    int epoch = 0;
    std::map<int, double> loss, ce, kl;  // per-bit means over batches
    std::map<int, double> accuracy;      // test accuracy after the epoch
    std::map<std::pair<int, int>, std::size_t> teacher_counts;  // (student, teacher) -> batches
    std::map<int, double> swap_student_fraction;                // realized, per student bit-width
    std::size_t batches = 0;
    std::size_t eps_clamps = 0;
};

class Trainer {
public:
    Trainer(RunConfig config, TrainTest data)
        : config_(std::move(config)), data_(std::move(data)), rng_(config_.seed) {
        config_.validate();
        const std::size_t d = shape_numel(config_.arch.input_shape);
        if (data_.train.sample_numel() != d || data_.train.sample_shape != config_.arch.input_shape) {
            throw ConfigError("dataset samples " + shape_str(data_.train.sample_shape) +
                              " do not match arch input " + shape_str(config_.arch.input_shape));
        }
        if (config_.arch.num_classes() != static_cast<std::size_t>(data_.train.num_classes)) {
            throw ConfigError("arch has " + std::to_string(config_.arch.num_classes()) + " outputs for " +
                              std::to_string(data_.train.num_classes) + " classes");
        }
        net_ = AdaptiveNetwork(config_.arch, config_.bit_set(), config_.bank_policy(), config_.alpha.init,
                               config_.bn_momentum, rng_.init);
    }

    const RunConfig& config() const { return config_; }
    AdaptiveNetwork& network() { return net_; }
    const AdaptiveNetwork& network() const { return net_; }
    Sgd& optimizer() { return opt_; }
    RngStreams& rng() { return rng_; }
    const TrainTest& data() const { return data_; }
    int epoch() const { return epoch_; }
    void set_epoch(int e) { epoch_ = e; }
    bool finished() const { return epoch_ >= config_.total_epochs(); }

    void set_row_sink(std::function<void(const MetricsRow&)> sink) { row_sink_ = std::move(sink); }

    /// Bit-widths trained during `epoch`, highest first.
    std::vector<int> active_bits(int epoch) const {
        const BitWidthSet b = config_.bit_set();
        switch (config_.mode) {
            case Mode::Direct: return {config_.mode_bits};
            case Mode::ProgressiveDesc: return {b[static_cast<std::size_t>(epoch / config_.epochs)]};
            case Mode::ProgressiveAsc: return {b[b.size() - 1 - static_cast<std::size_t>(epoch / config_.epochs)]};
            default: return b.bits();
        }
    }

    /// Epoch index within the current schedule (progressive modes restart it per bit-width).
    int local_epoch(int epoch) const { return config_.progressive() ? epoch % config_.epochs : epoch; }

    double lr_scale(int epoch) const {
        return config_.optimizer.schedule == "step" ? step_decay_factor(local_epoch(epoch), config_.epochs) : 1.0;
    }

    double p1(int epoch) const { return p1_at(local_epoch(epoch), config_.epochs, config_.p1_initial); }

    /// One optimizer step on one batch; returns one metrics row per trained bit-width.
    std::vector<MetricsRow> train_step(const Batch& batch, int epoch, std::size_t batch_index,
                                       std::size_t* eps_clamps = nullptr) {
        const std::vector<int> bits = active_bits(epoch);
        const bool distill = config_.mode == Mode::CoQuant;
        net_.zero_grad();
        Tape tape;
        std::vector<MetricsRow> rows;
        std::map<int, Tensor> logits_by_bits;
        std::optional<Tensor> total;

        for (std::size_t k = 0; k < bits.size(); ++k) {
            const int b = bits[k];
            MetricsRow row;
            row.epoch = epoch;
            row.batch = batch_index;
            row.mode = config_.mode_string();
            row.bits = b;

            ForwardOptions fo;
            fo.bits = b;
            fo.phase = Phase::Train;
            SwapMask mask;
            std::optional<Tensor> teacher_probs;
            if (distill && k > 0) {
                std::vector<TeacherCandidate> cands;
                for (std::size_t i = 0; i < k; ++i) {
                    TeacherCandidate c;
                    c.bits = bits[i];
                    c.entropy = entropy(probabilities(logits_by_bits.at(bits[i])));
                    c.distance = net_.model_distance(bits[i], b);
                    cands.push_back(c);
                }
                TeacherChoice choice = select_teacher(b, cands, config_.lambda);
                choice.epoch = epoch;
                choice.batch_index = batch_index;
                mask = sample_swap_mask(net_.num_blocks(), p1(epoch), rng_.swap);
                fo.mask = &mask;
                fo.teacher_bits = choice.teacher_bits;
                teacher_probs = probabilities(logits_by_bits.at(choice.teacher_bits));
                row.teacher_bits = choice.teacher_bits;
                row.entropy_term = choice.entropy_term;
                row.distance_term = choice.distance_term;
                row.swap_student_fraction = mask.student_fraction();
            }
            const Tensor logits = net_.forward(tape, batch.x, fo);
            logits_by_bits[b] = logits;
            BitLoss l = loss_for_bit(tape, logits, batch.y, teacher_probs);
            row.ce = l.ce;
            row.kl = l.kl;
            row.loss = l.total.item();
            total = total ? add(tape, *total, l.total) : l.total;
            rows.push_back(row);
        }
        if (!std::isfinite(total->item())) throw NumericError("non-finite total loss");
        tape.backward(*total);
        auto params = optimizer_params();
        opt_.step(params, lr_scale(epoch));
        if (eps_clamps) *eps_clamps += tape.eps_clamps;
        return rows;
    }

    /// Runs the next epoch: shuffled batches, one step each, then test accuracy.
    EpochRecord train_epoch() {
        if (finished()) throw ContractError("training already finished");
        const int epoch = epoch_;
        EpochRecord rec;
        rec.epoch = epoch;
        auto order = BatchIterator::identity_order(data_.train.size());
        rng_.shuffle.shuffle(order);
        BatchIterator it(data_.train, std::move(order), config_.batch_size);
        std::map<int, double> swap_sum;
        std::size_t batch_index = 0;
        while (auto batch = it.next()) {
            std::vector<MetricsRow> rows;
            try {
                rows = train_step(*batch, epoch, batch_index, &rec.eps_clamps);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                   " aborted: " + e.what());
            }
            for (const auto& r : rows) {
                rec.loss[r.bits] += r.loss;
                rec.ce[r.bits] += r.ce;
                rec.kl[r.bits] += r.kl;
                if (r.teacher_bits) ++rec.teacher_counts[{r.bits, *r.teacher_bits}];
                swap_sum[r.bits] += r.swap_student_fraction;
                if (row_sink_) row_sink_(r);
            }
            ++batch_index;
        }
        rec.batches = batch_index;
        const double nb = static_cast<double>(std::max<std::size_t>(batch_index, 1));
        for (auto* m : {&rec.loss, &rec.ce, &rec.kl})
            for (auto& [b, v] : *m) v /= nb;
        for (auto& [b, v] : swap_sum) rec.swap_student_fraction[b] = v / nb;
        ++epoch_;
        const bool last = epoch_ == config_.total_epochs();
        if (last || (config_.eval_every > 0 && epoch_ % config_.eval_every == 0)) {
            for (int b : config_.bits)
                if (net_.has_bank(b)) rec.accuracy[b] = evaluate(net_, b, data_.test, eval_batch_size());
        }
        return rec;
    }

    std::vector<EpochRecord> run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
        std::vector<EpochRecord> out;
        while (!finished()) {
            out.push_back(train_epoch());
            if (on_epoch) on_epoch(out.back());
        }
        return out;
    }

    std::size_t eval_batch_size() const { return std::max<std::size_t>(config_.batch_size, 256); }

    std::vector<NamedParam> optimizer_params() const {
        std::vector<NamedParam> out;
        const auto& o = config_.optimizer;
        for (auto& p : net_.parameters()) {
            NamedParam np{p.name, p.tensor, {o.lr, o.momentum, 0.0}, std::nullopt};
            switch (p.kind) {
                case ParamKind::Weight: np.hyper.weight_decay = o.weight_decay; break;
                case ParamKind::Alpha:
                    np.hyper = {config_.alpha.lr, o.momentum, config_.alpha.weight_decay};
                    np.floor = kAlphaFloor;
                    break;
                default: break;
            }
            out.push_back(std::move(np));
        }
        return out;
    }

private:
    RunConfig config_;
    TrainTest data_;
    RngStreams rng_;
    AdaptiveNetwork net_;
    Sgd opt_;
    int epoch_ = 0;
    std::function<void(const MetricsRow&)> row_sink_;
};

}  // namespace aq
