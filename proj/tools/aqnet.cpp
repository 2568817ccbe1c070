#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aq/aq.hpp"

namespace fs = std::filesystem;
using namespace aq;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void apply_globals(RunConfig& c, const Globals& g) {
    if (g.seed) c.seed = *g.seed;
    if (g.deterministic) c.deterministic = true;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string output_dir;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
    RunConfig config = load_config(a.config);
    apply_globals(config, g);
    config.validate();
    const std::string out_dir = a.output_dir.empty() ? config.output_dir : a.output_dir;

    std::optional<CheckpointData> ckpt;
    if (!a.resume.empty()) {
        ckpt = load_checkpoint(a.resume);
        RunConfig saved = ckpt->config;
        saved.output_dir = config.output_dir;
        if (to_json(saved) != to_json(config)) {
            throw ConfigError("checkpoint '" + a.resume + "' was written by a different config");
        }
    }

    Trainer trainer(config, load_dataset(config.dataset));
    const std::string metrics_path = path_in(out_dir, "metrics.csv");
    const std::string hist_path = path_in(out_dir, "teacher_hist.csv");

    MetricsCsv metrics(config);
    TeacherHistogram hist;
    if (ckpt) {
        const int start = ckpt->epoch;
        restore(trainer, std::move(*ckpt));
        if (fs::exists(metrics_path)) {
            metrics = MetricsCsv::from_existing(truncate_metrics(read_text(metrics_path), start));
            hist = parse_metrics_csv(metrics.text(), metrics_path).teachers;
        }
    }

    const std::string mode = config.mode_string();
    trainer.set_row_sink([&](const MetricsRow& r) { metrics.add(r); });
    EvalTable final_eval;
    trainer.run([&](const EpochRecord& e) {
        metrics.add(e, mode);
        accumulate(hist, e);
        metrics.write(metrics_path);
        atomic_write(hist_path, histogram_csv(hist));
        if (config.checkpoint_every > 0 && (e.epoch + 1) % config.checkpoint_every == 0) {
            save_checkpoint(path_in(out_dir, "checkpoint_e" + std::to_string(e.epoch + 1) + ".ckpt"), trainer);
        }
        final_eval.clear();
        for (const auto& [b, acc] : e.accuracy) final_eval[b] = EvalEntry{acc, false};
        if (!a.quiet) {
            std::fprintf(stderr, "epoch %d", e.epoch + 1);
            for (const auto& [b, l] : e.loss) std::fprintf(stderr, "  b%d loss %.4f", b, l);
            for (const auto& [b, acc] : e.accuracy) std::fprintf(stderr, "  acc@%d %.2f", b, acc);
            std::fprintf(stderr, "\n");
        }
    });
    metrics.write(metrics_path);
    atomic_write(hist_path, histogram_csv(hist));
    save_checkpoint(path_in(out_dir, "checkpoint.ckpt"), trainer);
    if (final_eval.empty()) {
        for (int b : config.bits)
            if (trainer.network().has_bank(b))
                final_eval[b] = EvalEntry{evaluate(trainer.network(), b, trainer.data().test, trainer.eval_batch_size()), false};
    }
    atomic_write(path_in(out_dir, "eval.json"), to_json(final_eval).dump(2) + "\n");
    std::printf("%s\n", to_json(final_eval).dump().c_str());
    return 0;
}

// ---------------------------------------------------------------------------

EvalTable eval_bits(AdaptiveNetwork& net, const RunConfig& config, const std::vector<int>& bits, const Dataset& test) {
    const std::size_t batch = std::max<std::size_t>(config.batch_size, 256);
    EvalTable t;
    for (int b : bits) {
        check_bits(b);
        const bool trained = std::find(config.bits.begin(), config.bits.end(), b) != config.bits.end();
        t[b] = EvalEntry{evaluate(net, b, test, batch), !trained};
    }
    return t;
}

void print_table(const EvalTable& t) {
    std::printf("b,accuracy,zero_shot\n");
    for (auto it = t.rbegin(); it != t.rend(); ++it)
        std::printf("%d,%s,%d\n", it->first, fmt_double(it->second.accuracy).c_str(), it->second.zero_shot ? 1 : 0);
}

struct EvalArgs {
    std::string ckpt, bundle, out;
    std::vector<int> bits;
};

int cmd_eval(const EvalArgs& a, const Globals&) {
    RunConfig config;
    AdaptiveNetwork net;
    if (!a.bundle.empty()) {
        if (a.ckpt.empty()) throw ConfigError("--bundle needs --ckpt for the dataset and config");
        config = load_checkpoint(a.ckpt).config;
        net = load_bundle(a.bundle);
    } else {
        CheckpointData c = load_checkpoint(a.ckpt);
        config = c.config;
        net = std::move(c.net);
    }
    const TrainTest data = load_dataset(config.dataset);
    const EvalTable t = eval_bits(net, config, a.bits.empty() ? config.bits : a.bits, data.test);
    print_table(t);
    if (!a.out.empty()) atomic_write(a.out, to_json(t).dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
    std::string ckpt, data = "train", out, eval_json;
    std::vector<int> bits;
};

int cmd_calibrate(const CalibrateArgs& a, const Globals& g) {
    CheckpointData c = load_checkpoint(a.ckpt);
    const TrainTest data = load_dataset(c.config.dataset);
    Dataset calib;
    if (a.data == "train") {
        calib = data.train;
    } else if (a.data == "test") {
        calib = data.test;
    } else {
        Json j;
        try {
            j = Json::parse(read_text(a.data));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("calibration data '" + a.data + "': " + e.what());
        }
        calib = load_dataset(dataset_spec_from_json(j)).train;
        if (calib.sample_shape != c.config.arch.input_shape) {
            throw ConfigError("calibration data samples " + shape_str(calib.sample_shape) + " do not match arch input " +
                              shape_str(c.config.arch.input_shape));
        }
    }
    const std::uint64_t seed = g.seed.value_or(c.config.seed);
    for (int b : a.bits) {
        check_bits(b);
        calibrate_bn(c.net, b, calib, c.config.batch_size, seed);
    }
    save_checkpoint(a.out.empty() ? a.ckpt : a.out, c);
    std::vector<int> all = c.config.bits;
    for (int b : a.bits)
        if (std::find(all.begin(), all.end(), b) == all.end()) all.push_back(b);
    const EvalTable t = eval_bits(c.net, c.config, all, data.test);
    print_table(t);
    if (!a.eval_json.empty()) atomic_write(a.eval_json, to_json(t).dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_export(const std::string& ckpt, const std::string& out) {
    CheckpointData c = load_checkpoint(ckpt);
    const BundleStats st = export_bundle(out, c.net);
    std::printf("bytes %zu\ncode_bytes %zu\nquantized_weights %zu\nfloat_weight_bytes %zu\npayload_ratio %s\n",
                st.total_bytes, st.code_bytes, st.quantized_weights, st.float_weight_bytes,
                fmt_double(st.payload_ratio()).c_str());
    return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
    std::string metrics, eval, reference, out;
};

int cmd_report(const ReportArgs& a) {
    const ParsedMetrics m = load_metrics_csv(a.metrics);
    EvalTable extra;
    if (!a.eval.empty()) extra = load_eval_json(a.eval);
    std::map<int, double> ref;
    if (!a.reference.empty()) {
        if (fs::path(a.reference).extension() == ".csv") {
            ref = load_metrics_csv(a.reference).final_accuracy;
        } else {
            for (const auto& [b, e] : load_eval_json(a.reference)) ref[b] = e.accuracy;
        }
    }
    const std::string text = render_report(build_report(m, extra, ref));
    if (a.out.empty()) {
        std::fputs(text.c_str(), stdout);
    } else {
        atomic_write(a.out, text);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive bit-width quantization-aware training"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "override the run seed")->check(CLI::NonNegativeNumber);
    app.add_flag("--deterministic", g.deterministic, "force deterministic execution");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train a run from a config file");
    train->add_option("--config", ta.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
    train->add_option("--resume", ta.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    train->add_option("--output-dir", ta.output_dir, "override config.output_dir");
    train->add_flag("--quiet", ta.quiet, "no per-epoch progress");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint at given bit-widths");
    eval->add_option("--ckpt", ea.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--bits", ea.bits, "bit-widths (default: the trained set)")->delimiter(',');
    eval->add_option("--bundle", ea.bundle, "evaluate this deployment bundle instead")->check(CLI::ExistingFile);
    eval->add_option("--out", ea.out, "write results as JSON");

    CalibrateArgs ca;
    auto* calib = app.add_subcommand("calibrate", "create or refresh batch-norm banks from data");
    calib->add_option("--ckpt", ca.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    calib->add_option("--bits", ca.bits, "bit-widths to calibrate")->required()->delimiter(',');
    calib->add_option("--data", ca.data, "train | test | dataset spec JSON file");
    calib->add_option("--out", ca.out, "output checkpoint (default: overwrite --ckpt)");
    calib->add_option("--eval-json", ca.eval_json, "write test accuracies as JSON");

    std::string ex_ckpt, ex_out;
    auto* exp = app.add_subcommand("export", "write a deployment bundle");
    exp->add_option("--ckpt", ex_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    exp->add_option("--out", ex_out, "bundle path")->required();

    ReportArgs ra;
    auto* report = app.add_subcommand("report", "accuracy table, delta_B and teacher histograms as CSV");
    report->add_option("--metrics", ra.metrics, "metrics CSV of a run")->required()->check(CLI::ExistingFile);
    report->add_option("--eval", ra.eval, "eval JSON with extra (e.g. zero-shot) entries")->check(CLI::ExistingFile);
    report->add_option("--reference", ra.reference, "reference accuracies (eval JSON or metrics CSV)")
        ->check(CLI::ExistingFile);
    report->add_option("--out", ra.out, "write the report here instead of stdout");

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) g.seed = seed;

    try {
        if (*train) return cmd_train(ta, g);
        if (*eval) return cmd_eval(ea, g);
        if (*calib) return cmd_calibrate(ca, g);
        if (*exp) return cmd_export(ex_ckpt, ex_out);
        if (*report) return cmd_report(ra);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "aqnet: error: %s\n", e.what());
        return 1;
    }
    return 1;
}
