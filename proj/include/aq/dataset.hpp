#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aq/json_util.hpp"
#include "aq/rng.hpp"
#include "aq/tensor.hpp"

namespace aq {

/// In-memory labelled samples, row-major, one sample after another.
struct Dataset {
    Shape sample_shape;
    std::vector<double> features;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_numel() const { return shape_numel(sample_shape); }

    Tensor gather(std::span<const std::size_t> idx) const {
        Shape s = sample_shape;
        s.insert(s.begin(), idx.size());
        std::vector<double> out;
        out.reserve(idx.size() * sample_numel());
        const std::size_t d = sample_numel();
        for (std::size_t i : idx) out.insert(out.end(), features.begin() + i * d, features.begin() + (i + 1) * d);
        return Tensor(std::move(s), std::move(out));
    }

    std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) out.push_back(labels[i]);
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
        for (int y : labels) ++c.at(static_cast<std::size_t>(y));
        return c;
    }
};

struct Batch {
    Tensor x;
    std::vector<int> y;
};

/// Yields consecutive batches in the given sample order; the last batch may be short.
class BatchIterator {
public:
    BatchIterator(const Dataset& data, std::vector<std::size_t> order, std::size_t batch_size)
        : data_(&data), order_(std::move(order)), batch_(batch_size) {
        if (batch_ == 0) throw ConfigError("batch size must be positive");
    }
    BatchIterator(const Dataset& data, std::size_t batch_size)
        : BatchIterator(data, identity_order(data.size()), batch_size) {}

    std::optional<Batch> next() {
        if (pos_ >= order_.size()) return std::nullopt;
        const std::size_t end = std::min(pos_ + batch_, order_.size());
        std::span<const std::size_t> idx(order_.data() + pos_, end - pos_);
        pos_ = end;
        return Batch{data_->gather(idx), data_->gather_labels(idx)};
    }

    std::size_t num_batches() const { return (order_.size() + batch_ - 1) / batch_; }

    static std::vector<std::size_t> identity_order(std::size_t n) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = i;
        return v;
    }

private:
    const Dataset* data_;
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Specs

enum class DatasetKind { SyntheticBlobs, IdxImages, CsvTable };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::SyntheticBlobs;
    // synthetic_blobs
    int classes = 4;
    std::size_t samples = 1000;
    std::size_t test_samples = 250;
    std::size_t dim = 8;
    double spread = 1.0;
    double center_scale = 1.0;
    std::uint64_t seed = 0;
    // idx_images / csv_table
    std::string train_path, train_labels_path, test_path, test_labels_path;
    // per-channel normalization (length 1 broadcasts)
    std::vector<double> norm_mean, norm_std;
};

inline const char* to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::SyntheticBlobs: return "synthetic_blobs";
        case DatasetKind::IdxImages: return "idx_images";
        case DatasetKind::CsvTable: return "csv_table";
    }
    return "?";
}

inline Json to_json(const DatasetSpec& s) {
    Json j{{"kind", to_string(s.kind)}};
    if (s.kind == DatasetKind::SyntheticBlobs) {
        j["classes"] = s.classes;
        j["samples"] = s.samples;
        j["test_samples"] = s.test_samples;
        j["dim"] = s.dim;
        j["spread"] = s.spread;
        j["center_scale"] = s.center_scale;
        j["seed"] = s.seed;
    } else {
        j["train"] = s.train_path;
        j["test"] = s.test_path;
        if (s.kind == DatasetKind::IdxImages) {
            j["train_labels"] = s.train_labels_path;
            j["test_labels"] = s.test_labels_path;
        }
        j["classes"] = s.classes;
    }
    if (!s.norm_mean.empty()) j["normalize"] = Json{{"mean", s.norm_mean}, {"std", s.norm_std}};
    return j;
}

inline DatasetSpec dataset_spec_from_json(const Json& j) {
    const std::string where = "dataset";
    DatasetSpec s;
    const auto kind = json_get<std::string>(j, "kind", where);
    if (kind == "synthetic_blobs") {
        reject_unknown_keys(j, {"kind", "classes", "samples", "test_samples", "dim", "spread", "center_scale", "seed",
                                "normalize"},
                            where);
        s.kind = DatasetKind::SyntheticBlobs;
        s.classes = json_get<int>(j, "classes", where);
        s.samples = json_get<std::size_t>(j, "samples", where);
        s.test_samples = json_get_or<std::size_t>(j, "test_samples", s.samples / 4, where);
        s.dim = json_get<std::size_t>(j, "dim", where);
        s.spread = json_get<double>(j, "spread", where);
        s.center_scale = json_get_or<double>(j, "center_scale", 1.0, where);
        s.seed = json_get_or<std::uint64_t>(j, "seed", 0, where);
    } else if (kind == "idx_images") {
        reject_unknown_keys(j, {"kind", "train", "train_labels", "test", "test_labels", "classes", "normalize"}, where);
        s.kind = DatasetKind::IdxImages;
        s.train_path = json_get<std::string>(j, "train", where);
        s.train_labels_path = json_get<std::string>(j, "train_labels", where);
        s.test_path = json_get_or<std::string>(j, "test", "", where);
        s.test_labels_path = json_get_or<std::string>(j, "test_labels", "", where);
        s.classes = json_get_or<int>(j, "classes", 10, where);
    } else if (kind == "csv_table") {
        reject_unknown_keys(j, {"kind", "train", "test", "classes", "normalize"}, where);
        s.kind = DatasetKind::CsvTable;
        s.train_path = json_get<std::string>(j, "train", where);
        s.test_path = json_get_or<std::string>(j, "test", "", where);
        s.classes = json_get<int>(j, "classes", where);
    } else {
        throw ConfigError("dataset: unknown kind '" + kind + "'");
    }
    if (j.contains("normalize")) {
        const Json& n = j["normalize"];
        reject_unknown_keys(n, {"mean", "std"}, where + ".normalize");
        s.norm_mean = json_get<std::vector<double>>(n, "mean", where + ".normalize");
        s.norm_std = json_get<std::vector<double>>(n, "std", where + ".normalize");
        if (s.norm_mean.empty() || s.norm_mean.size() != s.norm_std.size()) {
            throw ConfigError("dataset.normalize: mean and std must be non-empty and equally long");
        }
        for (double sd : s.norm_std)
            if (!(sd > 0.0)) throw ConfigError("dataset.normalize: std entries must be positive");
    }
    return s;
}

/// (x - mean[c]) / std[c] where c is the channel: axis 0 of a CHW sample, or
/// the feature index of a flat sample. Length-1 vectors broadcast.
inline void normalize(Dataset& d, const std::vector<double>& mean, const std::vector<double>& std_) {
    if (mean.empty()) return;
    const std::size_t channels = d.sample_shape.size() == 3 ? d.sample_shape[0] : d.sample_numel();
    if (mean.size() != 1 && mean.size() != channels) {
        throw ConfigError("normalize: " + std::to_string(mean.size()) + " statistics for " + std::to_string(channels) +
                          " channels");
    }
    const std::size_t per = d.sample_numel();
    const std::size_t inner = d.sample_shape.size() == 3 ? d.sample_shape[1] * d.sample_shape[2] : 1;
    for (std::size_t s = 0; s < d.size(); ++s)
        for (std::size_t k = 0; k < per; ++k) {
            const std::size_t c = mean.size() == 1 ? 0 : k / inner;
            double& v = d.features[s * per + k];
            v = (v - mean[c]) / std_[c];
        }
    check_finite("normalize", d.features);
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs

namespace detail {

inline Dataset sample_blobs(const std::vector<double>& centers, int m, std::size_t n, std::size_t d, double spread,
                            RngStream& rng) {
    Dataset out;
    out.sample_shape = {d};
    out.num_classes = m;
    out.features.reserve(n * d);
    out.labels.reserve(n);
    const auto mm = static_cast<std::size_t>(m);
    for (std::size_t c = 0; c < mm; ++c) {
        const std::size_t count = n / mm + (c < n % mm ? 1 : 0);
        for (std::size_t s = 0; s < count; ++s) {
            for (std::size_t k = 0; k < d; ++k) out.features.push_back(centers[c * d + k] + spread * rng.normal());
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

}  // namespace detail

struct TrainTest {
    Dataset train;
    Dataset test;
};

/// m Gaussian clusters with seeded centers; class sizes differ by at most one.
inline TrainTest gen_synthetic_blobs(const DatasetSpec& spec) {
    if (spec.classes < 2) throw ConfigError("synthetic_blobs: need at least 2 classes");
    if (spec.samples < static_cast<std::size_t>(spec.classes)) throw ConfigError("synthetic_blobs: samples < classes");
    if (spec.dim < 1) throw ConfigError("synthetic_blobs: dim must be positive");
    if (!(spec.spread > 0.0)) throw ConfigError("synthetic_blobs: spread must be positive");
    RngStream center_rng(spec.seed, 101), train_rng(spec.seed, 102), test_rng(spec.seed, 103);
    std::vector<double> centers(static_cast<std::size_t>(spec.classes) * spec.dim);
    for (double& c : centers) c = spec.center_scale * center_rng.normal();
    TrainTest tt;
    tt.train = detail::sample_blobs(centers, spec.classes, spec.samples, spec.dim, spec.spread, train_rng);
    if (spec.test_samples > 0) {
        tt.test = detail::sample_blobs(centers, spec.classes, spec.test_samples, spec.dim, spec.spread, test_rng);
    } else {
        tt.test.sample_shape = tt.train.sample_shape;
        tt.test.num_classes = spec.classes;
    }
    normalize(tt.train, spec.norm_mean, spec.norm_std);
    normalize(tt.test, spec.norm_mean, spec.norm_std);
    return tt;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, unsigned byte payload)

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) {
        throw FormatError(path + ": truncated header at byte offset " + std::to_string(off));
    }
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image file and its label file. Pixels are scaled to [0, 1]
/// and then normalized with `mean` / `std_` (empty: no normalization).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes,
                        const std::vector<double>& mean = {}, const std::vector<double>& std_ = {}) {
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);
    const std::uint32_t im = detail::read_be32(img, 0, images_path);
    if (im != kIdxImagesMagic) {
        throw FormatError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
    }
    const std::size_t n = detail::read_be32(img, 4, images_path);
    const std::size_t rows = detail::read_be32(img, 8, images_path);
    const std::size_t cols = detail::read_be32(img, 12, images_path);
    const std::size_t need = 16 + n * rows * cols;
    if (img.size() < need) {
        throw FormatError(images_path + ": truncated payload at byte offset " + std::to_string(img.size()) +
                          " (expected " + std::to_string(need) + " bytes)");
    }
    const std::uint32_t lm = detail::read_be32(lab, 0, labels_path);
    if (lm != kIdxLabelsMagic) {
        throw FormatError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
    }
    const std::size_t nl = detail::read_be32(lab, 4, labels_path);
    if (nl != n) {
        throw FormatError(labels_path + ": " + std::to_string(nl) + " labels for " + std::to_string(n) + " images");
    }
    if (lab.size() < 8 + n) {
        throw FormatError(labels_path + ": truncated payload at byte offset " + std::to_string(lab.size()) +
                          " (expected " + std::to_string(8 + n) + " bytes)");
    }
    Dataset d;
    d.sample_shape = {1, rows == 0 ? 1 : rows, cols == 0 ? 1 : cols};
    d.num_classes = num_classes;
    d.features.resize(n * rows * cols);
    for (std::size_t i = 0; i < d.features.size(); ++i) d.features[i] = img[16 + i] / 255.0;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        d.labels[i] = lab[8 + i];
        if (d.labels[i] >= num_classes) {
            throw FormatError(labels_path + ": label " + std::to_string(d.labels[i]) + " at byte offset " +
                              std::to_string(8 + i) + " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
    normalize(d, mean, std_);
    return d;
}

// ---------------------------------------------------------------------------
// CSV: numeric feature columns followed by an integer label column, no header.

inline Dataset load_csv(const std::string& path, int num_classes, const std::vector<double>& mean = {},
                        const std::vector<double>& std_ = {}) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    Dataset d;
    d.num_classes = num_classes;
    std::string line;
    std::size_t lineno = 0, width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                cells.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                throw FormatError(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            }
        }
        if (cells.size() < 2) throw FormatError(path + ":" + std::to_string(lineno) + ": need features and a label");
        if (width == 0) width = cells.size();
        if (cells.size() != width) throw FormatError(path + ":" + std::to_string(lineno) + ": ragged row");
        const double label = cells.back();
        if (label != std::floor(label) || label < 0 || label >= num_classes) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": bad label");
        }
        d.labels.push_back(static_cast<int>(label));
        d.features.insert(d.features.end(), cells.begin(), cells.end() - 1);
    }
    d.sample_shape = {width > 0 ? width - 1 : 1};
    normalize(d, mean, std_);
    return d;
}

inline TrainTest load_dataset(const DatasetSpec& spec) {
    switch (spec.kind) {
        case DatasetKind::SyntheticBlobs: return gen_synthetic_blobs(spec);
        case DatasetKind::IdxImages: {
            TrainTest tt;
            tt.train = load_idx(spec.train_path, spec.train_labels_path, spec.classes, spec.norm_mean, spec.norm_std);
            if (!spec.test_path.empty()) {
                tt.test = load_idx(spec.test_path, spec.test_labels_path, spec.classes, spec.norm_mean, spec.norm_std);
            } else {
                tt.test.sample_shape = tt.train.sample_shape;
                tt.test.num_classes = spec.classes;
            }
            return tt;
        }
        case DatasetKind::CsvTable: {
            TrainTest tt;
            tt.train = load_csv(spec.train_path, spec.classes, spec.norm_mean, spec.norm_std);
            if (!spec.test_path.empty()) {
                tt.test = load_csv(spec.test_path, spec.classes, spec.norm_mean, spec.norm_std);
            } else {
                tt.test.sample_shape = tt.train.sample_shape;
                tt.test.num_classes = spec.classes;
            }
            return tt;
        }
    }
    throw ConfigError("unknown dataset kind");
}

}  // namespace aq
