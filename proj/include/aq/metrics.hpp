#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "aq/binary_io.hpp"
#include "aq/config.hpp"
#include "aq/json_util.hpp"
#include "aq/trainer.hpp"

namespace aq {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline constexpr const char* kMetricsColumns =
    "kind,epoch,batch,mode,b,loss,ce,kl,teacher_b,entropy_term,distance_term,swap_student_fraction,accuracy";

/// Per-batch and per-epoch training metrics as CSV. The first line carries the
/// run's config as `# config: {json}`.
class MetricsCsv {
public:
    explicit MetricsCsv(const RunConfig& config) {
        text_ = "# config: " + to_json(config).dump() + "\n" + kMetricsColumns + "\n";
    }

    /// Continues an existing file (resumed runs).
    static MetricsCsv from_existing(std::string text) {
        MetricsCsv m;
        m.text_ = std::move(text);
        return m;
    }

    void add(const MetricsRow& r) {
        text_ += "batch," + std::to_string(r.epoch) + "," + std::to_string(r.batch) + "," + r.mode + "," +
                 std::to_string(r.bits) + "," + fmt_double(r.loss) + "," + fmt_double(r.ce) + "," + fmt_double(r.kl) +
                 "," + (r.teacher_bits ? std::to_string(*r.teacher_bits) : "") + "," + fmt_double(r.entropy_term) +
                 "," + fmt_double(r.distance_term) + "," + fmt_double(r.swap_student_fraction) + ",\n";
    }

    void add(const EpochRecord& e, const std::string& mode) {
        for (const auto& [b, loss] : e.loss) {
            auto acc = e.accuracy.find(b);
            auto sw = e.swap_student_fraction.find(b);
            text_ += "epoch," + std::to_string(e.epoch) + ",," + mode + "," + std::to_string(b) + "," +
                     fmt_double(loss) + "," + fmt_double(e.ce.at(b)) + "," + fmt_double(e.kl.at(b)) + ",,,," +
                     (sw != e.swap_student_fraction.end() ? fmt_double(sw->second) : "") + "," +
                     (acc != e.accuracy.end() ? fmt_double(acc->second) : "") + "\n";
        }
        // bit-widths evaluated but not trained this epoch (progressive modes)
        for (const auto& [b, acc] : e.accuracy) {
            if (e.loss.count(b)) continue;
            text_ += "epoch," + std::to_string(e.epoch) + ",," + mode + "," + std::to_string(b) + ",,,,,,,," +
                     fmt_double(acc) + "\n";
        }
    }

    const std::string& text() const { return text_; }
    void write(const std::string& path) const { atomic_write(path, text_); }

private:
    MetricsCsv() = default;
    std::string text_;
};

/// Teacher-selection counts keyed by (epoch, student_b, teacher_b).
using TeacherHistogram = std::map<std::tuple<int, int, int>, std::size_t>;

inline void accumulate(TeacherHistogram& h, const EpochRecord& e) {
    for (const auto& [key, n] : e.teacher_counts) h[{e.epoch, key.first, key.second}] += n;
}

inline std::string histogram_csv(const TeacherHistogram& h) {
    std::string out = "epoch,student_b,teacher_b,count\n";
    for (const auto& [k, n] : h) {
        out += std::to_string(std::get<0>(k)) + "," + std::to_string(std::get<1>(k)) + "," +
               std::to_string(std::get<2>(k)) + "," + std::to_string(n) + "\n";
    }
    return out;
}

/// Accuracy of one bit-width and whether its bank came from calibration.
struct EvalEntry {
    double accuracy = 0.0;
    bool zero_shot = false;
};

using EvalTable = std::map<int, EvalEntry>;

inline Json to_json(const EvalTable& t) {
    Json j = Json::object();
    for (const auto& [b, e] : t) j[std::to_string(b)] = {{"accuracy", e.accuracy}, {"zero_shot", e.zero_shot}};
    return j;
}

inline EvalTable eval_table_from_json(const Json& j, const std::string& where) {
    if (!j.is_object()) throw FormatError(where + ": expected an object keyed by bit-width");
    EvalTable t;
    for (const auto& [k, v] : j.items()) {
        int b = 0;
        try {
            std::size_t used = 0;
            b = std::stoi(k, &used);
            if (used != k.size()) throw std::invalid_argument(k);
        } catch (const std::exception&) {
            throw FormatError(where + ": key '" + k + "' is not a bit-width");
        }
        EvalEntry e;
        if (v.is_number()) {
            e.accuracy = v.get<double>();
        } else if (v.is_object() && v.contains("accuracy")) {
            e.accuracy = v.at("accuracy").get<double>();
            e.zero_shot = v.value("zero_shot", false);
        } else {
            throw FormatError(where + ": entry '" + k + "' needs an accuracy");
        }
        t[b] = e;
    }
    return t;
}

inline EvalTable load_eval_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    try {
        return eval_table_from_json(Json::parse(in), path);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Reading metrics back

struct ParsedMetrics {
    Json config;
    std::map<int, double> final_accuracy;  // last evaluated accuracy per b
    int last_epoch = -1;
    TeacherHistogram teachers;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline ParsedMetrics parse_metrics_csv(const std::string& text, const std::string& where) {
    ParsedMetrics m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> header;
    std::map<std::string, std::size_t> col;
    std::map<int, int> acc_epoch;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string tag = "# config: ";
            if (line.rfind(tag, 0) == 0) {
                try {
                    m.config = Json::parse(line.substr(tag.size()));
                } catch (const nlohmann::json::exception&) {
                    throw FormatError(where + ":" + std::to_string(lineno) + ": config header is not JSON");
                }
            }
            continue;
        }
        auto cells = split_csv_line(line);
        if (header.empty()) {
            header = cells;
            for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
            for (const char* need : {"kind", "epoch", "b", "teacher_b", "accuracy"})
                if (!col.count(need)) throw FormatError(where + ": missing column '" + std::string(need) + "'");
            continue;
        }
        if (cells.size() != header.size()) {
            throw FormatError(where + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                              " cells, got " + std::to_string(cells.size()));
        }
        try {
            const int epoch = std::stoi(cells[col["epoch"]]);
            const int b = std::stoi(cells[col["b"]]);
            m.last_epoch = std::max(m.last_epoch, epoch);
            if (cells[col["kind"]] == "batch") {
                const std::string& t = cells[col["teacher_b"]];
                if (!t.empty()) ++m.teachers[{epoch, b, std::stoi(t)}];
            } else if (cells[col["kind"]] == "epoch") {
                const std::string& a = cells[col["accuracy"]];
                if (!a.empty() && (!acc_epoch.count(b) || epoch >= acc_epoch[b])) {
                    m.final_accuracy[b] = std::stod(a);
                    acc_epoch[b] = epoch;
                }
            }
        } catch (const std::logic_error&) {
            throw FormatError(where + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    if (header.empty()) throw FormatError(where + ": no header row");
    return m;
}

/// Drops data rows from `epochs` onwards; comment and header lines are kept.
inline std::string truncate_metrics(const std::string& text, int epochs) {
    std::istringstream in(text);
    std::string line, out;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#' || !header) {
            header = header || line[0] != '#';
            out += line + "\n";
            continue;
        }
        const auto cells = split_csv_line(line);
        if (cells.size() > 1) {
            try {
                if (std::stoi(cells[1]) >= epochs) continue;
            } catch (const std::logic_error&) {
                throw FormatError("metrics: malformed epoch in '" + line + "'");
            }
        }
        out += line + "\n";
    }
    return out;
}

inline ParsedMetrics load_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_metrics_csv(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Report

struct Report {
    EvalTable accuracy;                        // trained and zero-shot bit-widths
    std::map<int, double> reference;          // optional per-b reference accuracy
    std::optional<double> delta_b;            // over trained bit-widths with a reference
    TeacherHistogram teachers;
};

inline Report build_report(const ParsedMetrics& metrics, const EvalTable& extra, const std::map<int, double>& reference) {
    Report r;
    for (const auto& [b, a] : metrics.final_accuracy) r.accuracy[b] = EvalEntry{a, false};
    for (const auto& [b, e] : extra) r.accuracy[b] = e;
    r.reference = reference;
    r.teachers = metrics.teachers;
    std::map<int, double> m, ref;
    for (const auto& [b, e] : r.accuracy) {
        if (e.zero_shot) continue;
        auto it = reference.find(b);
        if (it == reference.end()) {
            m.clear();
            break;
        }
        m[b] = e.accuracy;
        ref[b] = it->second;
    }
    if (!m.empty()) r.delta_b = delta_b(m, ref);
    return r;
}

inline std::string render_report(const Report& r) {
    std::string out = "b,accuracy,zero_shot,reference,relative\n";
    for (auto it = r.accuracy.rbegin(); it != r.accuracy.rend(); ++it) {
        const auto& [b, e] = *it;
        auto ref = r.reference.find(b);
        const bool has_ref = ref != r.reference.end() && ref->second > 0.0;
        out += std::to_string(b) + "," + fmt_double(e.accuracy) + "," + (e.zero_shot ? "1" : "0") + "," +
               (has_ref ? fmt_double(ref->second) : "") + "," +
               (has_ref ? fmt_double(100.0 * e.accuracy / ref->second) : "") + "\n";
    }
    out += "\ndelta_b\n" + (r.delta_b ? fmt_double(*r.delta_b) : std::string("")) + "\n";
    out += "\n" + histogram_csv(r.teachers);
    return out;
}

}  // namespace aq
