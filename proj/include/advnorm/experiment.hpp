#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/hash.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/phantom.hpp"
#include "advnorm/pipeline.hpp"
#include "advnorm/trainer.hpp"

namespace advnorm {

struct ExperimentConfig {
    PhantomConfig phantom = default_phantom_config();
    PipelineConfig pipeline;
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    int histogram_bins = 100;

    void validate() const {
        phantom.validate();
        pipeline.validate();
        train.validate();
        loss.validate();
        if (histogram_bins < 2)
            throw ValidationError("experiment: histogram_bins must be >= 2");
    }
};

inline void to_json(nlohmann::ordered_json& j, const ExperimentConfig& c) {
    nlohmann::ordered_json ph, pl, mo, tr, lo;
    to_json(ph, c.phantom);
    to_json(pl, c.pipeline);
    to_json(mo, c.model);
    to_json(tr, c.train);
    to_json(lo, c.loss);
    j = nlohmann::ordered_json{{"phantom", ph},         {"pipeline", pl}, {"model", mo},
                               {"train", tr},           {"loss", lo},
                               {"histogram_bins", c.histogram_bins}};
}

inline void from_json(const nlohmann::ordered_json& j, ExperimentConfig& c) {
    c = ExperimentConfig{};
    if (j.contains("phantom")) from_json(j.at("phantom"), c.phantom);
    if (j.contains("pipeline")) from_json(j.at("pipeline"), c.pipeline);
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("loss")) from_json(j.at("loss"), c.loss);
    if (j.contains("histogram_bins")) j.at("histogram_bins").get_to(c.histogram_bins);
}

struct EvalResult {
    std::vector<ClassDice> per_class;
    double mean_foreground = 0.0;
    std::size_t patches = 0;
};

/// Hard Dice of a model over one split of a patch set, micro-aggregated
/// across patches per class.
template <typename T>
EvalResult evaluate_bundle(ModelBundle<T>& b, const PatchSet& ps, Split split) {
    DiceAccumulator acc(ps.num_classes);
    EvalResult r;
    for (std::size_t i : ps.indices_of(split)) {
        const Patch& p = ps.patches[i];
        nn::Tensor<T> probs = b.predict(image_to_tensor<T>(p.image));
        auto labels = argmax_labels(probs);
        acc.add(labels.data(), p.mask.labels.data(), labels.size());
        ++r.patches;
    }
    if (r.patches == 0) throw ValidationError("evaluate: split holds no patches");
    r.per_class = acc.per_class();
    r.mean_foreground = acc.mean_foreground();
    return r;
}

/// Applies the generator to a whole volume through overlapping windows with
/// edge-clamped origins; overlaps are averaged. Every voxel is covered, no
/// foreground filtering. Without a generator the input passes through.
template <typename T>
Volume normalize_volume(ModelBundle<T>& b, const Volume& img, int side, int stride) {
    img.validate();
    if (!b.g) return img;
    if (side < 1 || stride < 1)
        throw ValidationError("normalize: window side and stride must be positive");
    auto origins = [&](std::size_t n) {
        if (static_cast<std::size_t>(side) > n)
            throw ValidationError("normalize: window side " + std::to_string(side) +
                                  " exceeds volume extent " + std::to_string(n));
        std::vector<int> o;
        for (std::size_t s = 0; s + side < n + 1; s += static_cast<std::size_t>(stride))
            o.push_back(static_cast<int>(s));
        if (o.empty() || o.back() != static_cast<int>(n) - side)
            o.push_back(static_cast<int>(n) - side);
        return o;
    };
    const auto ox = origins(img.shape.nx), oy = origins(img.shape.ny), oz = origins(img.shape.nz);
    std::vector<double> sum(img.data.size(), 0.0);
    std::vector<std::uint32_t> cover(img.data.size(), 0);
    nn::Tensor<T> window(1, side, side, side);
    for (int z0 : oz)
        for (int y0 : oy)
            for (int x0 : ox) {
                for (int z = 0; z < side; ++z)
                    for (int y = 0; y < side; ++y)
                        for (int x = 0; x < side; ++x)
                            window.v[window.at(0, x, y, z)] =
                                static_cast<T>(img.at(x0 + x, y0 + y, z0 + z));
                nn::Tensor<T> out = b.g->forward(window);
                for (int z = 0; z < side; ++z)
                    for (int y = 0; y < side; ++y)
                        for (int x = 0; x < side; ++x) {
                            const std::size_t vi = img.shape.index(x0 + x, y0 + y, z0 + z);
                            sum[vi] += static_cast<double>(out.v[out.at(0, x, y, z)]);
                            ++cover[vi];
                        }
            }
    Volume result = img;
    for (std::size_t i = 0; i < sum.size(); ++i)
        result.data[i] = static_cast<float>(sum[i] / cover[i]);
    return result;
}

/// Per-voxel class probabilities for a whole volume via overlapping windows
/// and overlap-averaged reconstruction.
template <typename T>
SoftSegmentation segment_volume(ModelBundle<T>& b, const Volume& img, int side, int stride) {
    img.validate();
    if (side < 1 || stride < 1)
        throw ValidationError("segment: window side and stride must be positive");
    auto origins = [&](std::size_t n) {
        if (static_cast<std::size_t>(side) > n)
            throw ValidationError("segment: window side " + std::to_string(side) +
                                  " exceeds volume extent " + std::to_string(n));
        std::vector<int> o;
        for (std::size_t s = 0; s + side < n + 1; s += static_cast<std::size_t>(stride))
            o.push_back(static_cast<int>(s));
        if (o.empty() || o.back() != static_cast<int>(n) - side)
            o.push_back(static_cast<int>(n) - side);
        return o;
    };
    const auto ox = origins(img.shape.nx), oy = origins(img.shape.ny), oz = origins(img.shape.nz);
    const int C = b.s->config().out_channels;
    std::vector<PatchPrediction> preds;
    nn::Tensor<T> window(1, side, side, side);
    for (int z0 : oz)
        for (int y0 : oy)
            for (int x0 : ox) {
                for (int z = 0; z < side; ++z)
                    for (int y = 0; y < side; ++y)
                        for (int x = 0; x < side; ++x)
                            window.v[window.at(0, x, y, z)] =
                                static_cast<T>(img.at(x0 + x, y0 + y, z0 + z));
                nn::Tensor<T> probs = b.predict(window);
                PatchPrediction pp;
                pp.origin = {x0, y0, z0};
                pp.side = side;
                pp.num_classes = C;
                pp.probs.resize(probs.v.size());
                for (std::size_t i = 0; i < probs.v.size(); ++i)
                    pp.probs[i] = static_cast<float>(probs.v[i]);
                preds.push_back(std::move(pp));
            }
    return reconstruct_from_patches(preds, img.shape, C);
}

struct RowResult {
    int row = 0;
    std::string name;
    std::string mode;
    std::string trained_on;
    std::string tested_on;
    std::vector<double> per_class_dice;
    std::vector<int> empty_classes; // classes scored by the both-empty convention
    double mean_dice = std::numeric_limits<double>::quiet_NaN();
    double jsd_before = std::numeric_limits<double>::quiet_NaN();
    double jsd_after = std::numeric_limits<double>::quiet_NaN();
    std::string checkpoint;
    std::string config_hash;
    bool failed = false;
    std::string error;
    double seconds = 0.0;
};

struct MatrixResult {
    std::vector<RowResult> rows;

    const RowResult& row(int n) const {
        for (const auto& r : rows)
            if (r.row == n) return r;
        throw ValidationError("matrix: no row " + std::to_string(n));
    }
};

inline void to_json(nlohmann::ordered_json& j, const RowResult& r) {
    j = nlohmann::ordered_json{{"row", r.row},
                               {"name", r.name},
                               {"mode", r.mode},
                               {"trained_on", r.trained_on},
                               {"tested_on", r.tested_on},
                               {"per_class_dice", r.per_class_dice},
                               {"mean_dice", r.mean_dice}};
    if (!r.empty_classes.empty()) j["empty_classes"] = r.empty_classes;
    if (!std::isnan(r.jsd_before)) j["jsd_before"] = r.jsd_before;
    if (!std::isnan(r.jsd_after)) j["jsd_after"] = r.jsd_after;
    j["checkpoint"] = r.checkpoint;
    j["config_hash"] = r.config_hash;
    if (r.failed) {
        j["failed"] = true;
        j["error"] = r.error;
    }
    j["seconds"] = r.seconds;
}

namespace detail {

inline DatasetManifest filter_domain(const DatasetManifest& m, int domain) {
    DatasetManifest out = m;
    out.samples.clear();
    for (const auto& s : m.samples)
        if (s.domain == domain) out.samples.push_back(s);
    if (out.samples.empty())
        throw ValidationError("manifest has no samples for domain " + std::to_string(domain));
    return out;
}

inline std::vector<double> dice_values(const EvalResult& r) {
    std::vector<double> out;
    out.reserve(r.per_class.size());
    for (const auto& c : r.per_class) out.push_back(c.dice);
    return out;
}

/// Foreground intensity sets for the validation patches, one per patch:
/// raw inputs, and the same patches through the generator.
template <typename T>
void collect_intensity_sets(ModelBundle<T>& b, const PatchSet& ps,
                            std::vector<std::vector<float>>& before,
                            std::vector<std::vector<float>>& after) {
    for (std::size_t i : ps.indices_of(Split::Validation)) {
        const Patch& p = ps.patches[i];
        auto raw = foreground_intensities(p.image, p.mask);
        if (raw.empty()) continue;
        nn::Tensor<T> gx = b.normalize(image_to_tensor<T>(p.image));
        Volume gvol = tensor_to_volume(gx, p.image.spacing);
        before.push_back(std::move(raw));
        after.push_back(foreground_intensities(gvol, p.mask));
    }
}

/// Per-domain CSV of input vs generator-output foreground intensity
/// histograms, one block of bins per class, shared binning per file.
template <typename T>
void write_class_histograms(ModelBundle<T>& b, const PatchSet& ps, int domain, int bins,
                            const std::filesystem::path& path) {
    const int C = ps.num_classes;
    std::vector<std::vector<float>> input_by_class(static_cast<std::size_t>(C));
    std::vector<std::vector<float>> output_by_class(static_cast<std::size_t>(C));
    for (std::size_t i : ps.indices_of(Split::Validation, domain)) {
        const Patch& p = ps.patches[i];
        nn::Tensor<T> gx = b.normalize(image_to_tensor<T>(p.image));
        for (std::size_t v = 0; v < p.image.data.size(); ++v) {
            const std::uint8_t c = p.mask.labels[v];
            if (c == 0) continue;
            input_by_class[c].push_back(p.image.data[v]);
            output_by_class[c].push_back(static_cast<float>(gx.v[v]));
        }
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int c = 1; c < C; ++c) {
        for (float v : input_by_class[static_cast<std::size_t>(c)]) {
            lo = std::min(lo, static_cast<double>(v));
            hi = std::max(hi, static_cast<double>(v));
        }
        for (float v : output_by_class[static_cast<std::size_t>(c)]) {
            lo = std::min(lo, static_cast<double>(v));
            hi = std::max(hi, static_cast<double>(v));
        }
    }
    if (!std::isfinite(lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << "bin_center,input_mass,normalized_mass,class\n";
    char line[160];
    for (int c = 1; c < C; ++c) {
        Histogram hin = make_histogram(input_by_class[static_cast<std::size_t>(c)], lo, hi, bins);
        Histogram hout = make_histogram(output_by_class[static_cast<std::size_t>(c)], lo, hi, bins);
        for (std::size_t bgn = 0; bgn < hin.mass.size(); ++bgn) {
            std::snprintf(line, sizeof(line), "%.9g,%.9g,%.9g,%d\n", hin.bin_center(bgn),
                          hin.mass[bgn], hout.mass[bgn], c);
            out << line;
        }
    }
}

} // namespace detail

inline void write_matrix_reports(const MatrixResult& result, const std::filesystem::path& out_dir) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : result.rows) {
        nlohmann::ordered_json j;
        to_json(j, r);
        rows.push_back(j);
    }
    nlohmann::ordered_json deltas;
    for (const auto& a : result.rows)
        for (const auto& b : result.rows) {
            if (a.row >= b.row) continue;
            deltas["row" + std::to_string(a.row) + "_minus_row" + std::to_string(b.row)] =
                a.mean_dice - b.mean_dice;
        }
    nlohmann::ordered_json report{{"rows", rows}, {"mean_dice_deltas", deltas}};
    {
        std::ofstream f(out_dir / "report.json");
        if (!f) throw ValidationError("cannot write report.json");
        f << report.dump(2) << "\n";
    }
    {
        std::ofstream f(out_dir / "report.csv");
        f << "row,name,mode,trained_on,tested_on,mean_dice,jsd_before,jsd_after,seconds\n";
        char line[256];
        for (const auto& r : result.rows) {
            std::snprintf(line, sizeof(line), "%d,%s,%s,%s,%s,%.6f,%.6f,%.6f,%.3f\n", r.row,
                          r.name.c_str(), r.mode.c_str(), r.trained_on.c_str(), r.tested_on.c_str(),
                          r.mean_dice, r.jsd_before, r.jsd_after, r.seconds);
            f << line;
        }
    }
    {
        std::ofstream f(out_dir / "report.txt");
        char line[256];
        std::snprintf(line, sizeof(line), "%-4s %-22s %-16s %-8s %-8s %10s %11s %11s\n", "row",
                      "name", "mode", "train", "test", "mean_dice", "jsd_before", "jsd_after");
        f << line;
        for (const auto& r : result.rows) {
            auto num = [](double v) { return std::isnan(v) ? std::string("-") : std::to_string(v); };
            std::snprintf(line, sizeof(line), "%-4d %-22s %-16s %-8s %-8s %10.4f %11s %11s\n",
                          r.row, r.name.c_str(), r.mode.c_str(), r.trained_on.c_str(),
                          r.tested_on.c_str(), r.mean_dice, num(r.jsd_before).c_str(),
                          num(r.jsd_after).c_str());
            f << line;
        }
    }
}

/// Runs the full seven-row study into out_dir: per-domain baselines, the
/// cross-domain transfers of those baselines, and the three pooled variants.
/// Rows 3 and 4 reuse the checkpoints of rows 1 and 2 without retraining.
template <typename T>
MatrixResult run_experiment_matrix(const ExperimentConfig& cfg_in,
                                   const std::filesystem::path& out_dir,
                                   const BatchHook& hook = {}) {
    ExperimentConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.phantom.domains.size() != 2)
        throw ValidationError("experiment matrix: exactly two domains are required, got " +
                              std::to_string(cfg.phantom.domains.size()));
    std::filesystem::create_directories(out_dir);
    {
        nlohmann::ordered_json j;
        to_json(j, cfg);
        std::ofstream f(out_dir / "resolved_config.json");
        f << j.dump(2) << "\n";
    }
    const auto data_dir = out_dir / "data";
    DatasetManifest manifest = generate_domain_dataset(cfg.phantom, data_dir);

    PipelineConfig pl_raw = cfg.pipeline;
    pl_raw.standardize = false;
    PipelineConfig pl_std = cfg.pipeline;
    pl_std.standardize = true;
    const std::uint64_t seed = cfg.train.seed;
    PatchSet ps1 = preprocess_dataset(data_dir, detail::filter_domain(manifest, 1), pl_raw, seed);
    PatchSet ps2 = preprocess_dataset(data_dir, detail::filter_domain(manifest, 2), pl_raw, seed);
    PatchSet pooled_raw = preprocess_dataset(data_dir, manifest, pl_raw, seed);
    PatchSet pooled_std = preprocess_dataset(data_dir, manifest, pl_std, seed);

    MatrixResult result;
    auto fill_dice = [](RowResult& r, const EvalResult& ev) {
        r.per_class_dice = detail::dice_values(ev);
        for (std::size_t c = 0; c < ev.per_class.size(); ++c)
            if (ev.per_class[c].both_empty) r.empty_classes.push_back(static_cast<int>(c));
        r.mean_dice = ev.mean_foreground;
    };
    // A diverged sub-run marks its row failed; the remaining rows still run.
    auto trained_row = [&](int row, const std::string& name, const std::string& mode,
                           const std::string& tag, const PatchSet& ps, bool with_jsd) {
        auto t0 = std::chrono::steady_clock::now();
        RowResult r;
        r.row = row;
        r.name = name;
        r.mode = mode;
        r.trained_on = tag;
        r.tested_on = tag;
        const auto row_dir = out_dir / ("row" + std::to_string(row));
        try {
            TrainConfig tc = cfg.train;
            tc.mode = mode;
            Trainer<T> trainer(cfg.model, tc, cfg.loss, ps, row_dir);
            r.config_hash = hex64(trainer.config_hash());
            trainer.run(hook);
            fill_dice(r, evaluate_bundle(trainer.bundle(), ps, Split::Test));
            r.checkpoint = (row_dir / "checkpoints" / "last.mvol").string();
            if (with_jsd) {
                std::vector<std::vector<float>> before, after;
                detail::collect_intensity_sets(trainer.bundle(), ps, before, after);
                r.jsd_before = population_jsd(before, cfg.histogram_bins);
                r.jsd_after = population_jsd(after, cfg.histogram_bins);
                for (int d = 1; d <= ps.k_domains; ++d)
                    detail::write_class_histograms(
                        trainer.bundle(), ps, d, cfg.histogram_bins,
                        row_dir / ("histograms_domain" + std::to_string(d) + ".csv"));
            }
        } catch (const DivergenceError& e) {
            r.failed = true;
            r.error = e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.rows.push_back(r);
        return r;
    };
    auto transfer_row = [&](int row, const std::string& name, const RowResult& source,
                            const std::string& tag, const PatchSet& ps) {
        auto t0 = std::chrono::steady_clock::now();
        RowResult r;
        r.row = row;
        r.name = name;
        r.mode = source.mode;
        r.trained_on = source.trained_on;
        r.tested_on = tag;
        r.checkpoint = source.checkpoint;
        r.config_hash = source.config_hash;
        if (source.failed) {
            r.failed = true;
            r.error = "source row " + std::to_string(source.row) + " failed";
        } else {
            ModelBundle<T> b = load_model_bundle<T>(source.checkpoint);
            fill_dice(r, evaluate_bundle(b, ps, Split::Test));
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.rows.push_back(r);
        return r;
    };

    RowResult r1 = trained_row(1, "train_d1_test_d1", "segmenter_only", "domain1", ps1, false);
    RowResult r2 = trained_row(2, "train_d2_test_d2", "segmenter_only", "domain2", ps2, false);
    transfer_row(3, "train_d1_test_d2", r1, "domain2", ps2);
    transfer_row(4, "train_d2_test_d1", r2, "domain1", ps1);
    trained_row(5, "pooled_standardized", "segmenter_only", "pooled", pooled_std, false);
    trained_row(6, "pooled_generator", "no_discriminator", "pooled", pooled_raw, true);
    trained_row(7, "pooled_adversarial", "adversarial", "pooled", pooled_raw, true);

    write_matrix_reports(result, out_dir);
    return result;
}

} // namespace advnorm
