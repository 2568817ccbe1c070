#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aq/arch.hpp"
#include "aq/dataset.hpp"
#include "aq/json_util.hpp"
#include "aq/network.hpp"

namespace aq {

inline constexpr int kConfigSchemaVersion = 1;

enum class Mode { CoQuant, Joint, SwitchableBn, AdaBits, Individual, ProgressiveDesc, ProgressiveAsc, Direct };

struct OptimizerSettings {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::string schedule = "step";  // "step" | "constant"
};

struct AlphaSettings {
    double init = 6.0;
    double lr = 0.01;
    double weight_decay = 0.0;
};

/// Everything that defines an experiment.
struct RunConfig {
    Mode mode = Mode::CoQuant;
    int mode_bits = 0;  // the b of individual:b and direct:b
    std::vector<int> bits{8, 6, 4, 2};
    double lambda = 0.1;
    double p1_initial = 0.5;
    OptimizerSettings optimizer;
    AlphaSettings alpha;
    double bn_momentum = 0.1;
    int epochs = 30;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    bool deterministic = true;
    ArchSpec arch;
    DatasetSpec dataset;
    std::string output_dir = "run";
    int checkpoint_every = 0;  // 0: only the final checkpoint
    int eval_every = 0;        // test-set evaluation period in epochs; 0: final epoch only

    BitWidthSet bit_set() const { return BitWidthSet(bits); }

    /// Which banks a mode keeps per bit-width.
    BankPolicy bank_policy() const {
        switch (mode) {
            case Mode::Joint:
            case Mode::Direct: return {false, false};
            case Mode::SwitchableBn: return {true, false};
            default: return {true, true};
        }
    }

    std::string mode_string() const {
        switch (mode) {
            case Mode::CoQuant: return "coquant";
            case Mode::Joint: return "joint";
            case Mode::SwitchableBn: return "switchable_bn";
            case Mode::AdaBits: return "adabits";
            case Mode::Individual: return "individual:" + std::to_string(mode_bits);
            case Mode::ProgressiveDesc: return "progressive_desc";
            case Mode::ProgressiveAsc: return "progressive_asc";
            case Mode::Direct: return "direct:" + std::to_string(mode_bits);
        }
        return "?";
    }

    bool progressive() const { return mode == Mode::ProgressiveDesc || mode == Mode::ProgressiveAsc; }

    /// Epochs the trainer runs in total (progressive modes run `epochs` per bit-width).
    int total_epochs() const { return progressive() ? epochs * static_cast<int>(bits.size()) : epochs; }

    void validate() const {
        const BitWidthSet b = bit_set();
        if (mode == Mode::Individual && !(b.size() == 1 && b.b1() == mode_bits)) {
            throw ConfigError("mode individual:" + std::to_string(mode_bits) + " requires bits == [" +
                              std::to_string(mode_bits) + "]");
        }
        if (mode == Mode::Direct && !b.contains(mode_bits)) {
            throw ConfigError("mode direct:" + std::to_string(mode_bits) + " requires its source in bits");
        }
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
        if (!(p1_initial > 0.0 && p1_initial <= 1.0)) throw ConfigError("p1_initial must be in (0, 1]");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
        if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) throw ConfigError("optimizer.momentum in [0, 1)");
        if (optimizer.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be non-negative");
        if (optimizer.schedule != "step" && optimizer.schedule != "constant") {
            throw ConfigError("optimizer.schedule must be 'step' or 'constant'");
        }
        if (!(alpha.init > 0.0)) throw ConfigError("alpha.init must be positive");
        if (!(alpha.lr > 0.0)) throw ConfigError("alpha.lr must be positive");
        if (alpha.weight_decay < 0.0) throw ConfigError("alpha.weight_decay must be non-negative");
        if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must be in (0, 1]");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
        if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
        arch.validate();
    }
};

inline Mode parse_mode(const std::string& s, int& mode_bits) {
    mode_bits = 0;
    auto with_bits = [&](const std::string& prefix) -> bool {
        if (s.rfind(prefix, 0) != 0) return false;
        try {
            std::size_t used = 0;
            mode_bits = std::stoi(s.substr(prefix.size()), &used);
            if (used != s.size() - prefix.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            throw ConfigError("mode '" + s + "': expected " + prefix + "<bits>");
        }
        check_bits(mode_bits);
        return true;
    };
    if (s == "coquant") return Mode::CoQuant;
    if (s == "joint") return Mode::Joint;
    if (s == "switchable_bn") return Mode::SwitchableBn;
    if (s == "adabits") return Mode::AdaBits;
    if (s == "progressive_desc") return Mode::ProgressiveDesc;
    if (s == "progressive_asc") return Mode::ProgressiveAsc;
    if (with_bits("individual:")) return Mode::Individual;
    if (with_bits("direct:")) return Mode::Direct;
    throw ConfigError("unknown mode '" + s + "'");
}

inline Json to_json(const RunConfig& c) {
    return Json{{"schema_version", kConfigSchemaVersion},
                {"mode", c.mode_string()},
                {"bits", c.bits},
                {"lambda", c.lambda},
                {"p1_initial", c.p1_initial},
                {"optimizer",
                 {{"lr", c.optimizer.lr},
                  {"momentum", c.optimizer.momentum},
                  {"weight_decay", c.optimizer.weight_decay},
                  {"schedule", c.optimizer.schedule}}},
                {"alpha", {{"init", c.alpha.init}, {"lr", c.alpha.lr}, {"weight_decay", c.alpha.weight_decay}}},
                {"bn_momentum", c.bn_momentum},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"deterministic", c.deterministic},
                {"arch", to_json(c.arch)},
                {"dataset", to_json(c.dataset)},
                {"output_dir", c.output_dir},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_every", c.eval_every}};
}

inline RunConfig config_from_json(const Json& j) {
    const std::string where = "config";
    reject_unknown_keys(j,
                        {"schema_version", "mode", "bits", "lambda", "p1_initial", "optimizer", "alpha", "bn_momentum",
                         "epochs", "batch_size", "seed", "deterministic", "arch", "dataset", "output_dir",
                         "checkpoint_every", "eval_every"},
                        where);
    const int version = json_get<int>(j, "schema_version", where);
    if (version != kConfigSchemaVersion) {
        throw ConfigError("config: schema_version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
    }
    RunConfig c;
    c.mode = parse_mode(json_get<std::string>(j, "mode", where), c.mode_bits);
    c.bits = json_get<std::vector<int>>(j, "bits", where);
    c.lambda = json_get_or<double>(j, "lambda", c.lambda, where);
    c.p1_initial = json_get_or<double>(j, "p1_initial", c.p1_initial, where);
    if (j.contains("optimizer")) {
        const Json& o = j["optimizer"];
        reject_unknown_keys(o, {"lr", "momentum", "weight_decay", "schedule"}, "config.optimizer");
        c.optimizer.lr = json_get_or<double>(o, "lr", c.optimizer.lr, "config.optimizer");
        c.optimizer.momentum = json_get_or<double>(o, "momentum", c.optimizer.momentum, "config.optimizer");
        c.optimizer.weight_decay = json_get_or<double>(o, "weight_decay", c.optimizer.weight_decay, "config.optimizer");
        c.optimizer.schedule = json_get_or<std::string>(o, "schedule", c.optimizer.schedule, "config.optimizer");
    }
    if (j.contains("alpha")) {
        const Json& a = j["alpha"];
        reject_unknown_keys(a, {"init", "lr", "weight_decay"}, "config.alpha");
        c.alpha.init = json_get_or<double>(a, "init", c.alpha.init, "config.alpha");
        c.alpha.lr = json_get_or<double>(a, "lr", c.alpha.lr, "config.alpha");
        c.alpha.weight_decay = json_get_or<double>(a, "weight_decay", c.alpha.weight_decay, "config.alpha");
    }
    c.bn_momentum = json_get_or<double>(j, "bn_momentum", c.bn_momentum, where);
    c.epochs = json_get<int>(j, "epochs", where);
    c.batch_size = json_get<std::size_t>(j, "batch_size", where);
    c.seed = json_get_or<std::uint64_t>(j, "seed", c.seed, where);
    c.deterministic = json_get_or<bool>(j, "deterministic", c.deterministic, where);
    if (!j.contains("arch")) throw ConfigError("config: missing key 'arch'");
    c.arch = arch_from_json(j["arch"]);
    if (!j.contains("dataset")) throw ConfigError("config: missing key 'dataset'");
    c.dataset = dataset_spec_from_json(j["dataset"]);
    c.output_dir = json_get_or<std::string>(j, "output_dir", c.output_dir, where);
    c.checkpoint_every = json_get_or<int>(j, "checkpoint_every", c.checkpoint_every, where);
    c.eval_every = json_get_or<int>(j, "eval_every", c.eval_every, where);
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

}  // namespace aq
