#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/mvol_io.hpp"
#include "advnorm/rng.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

/// Zero every voxel outside the brain mask. Idempotent.
inline Volume skull_strip(const Volume& image, const SegmentationMask& mask) {
    if (!(image.shape == mask.shape))
        throw ValidationError("skull_strip: image/mask shape mismatch");
    Volume out = image;
    for (std::size_t v = 0; v < out.data.size(); ++v)
        if (mask.labels[v] == 0) out.data[v] = 0.0f;
    return out;
}

namespace detail {

inline int resampled_extent(int n, double spacing, double target) {
    return static_cast<int>(std::llround(static_cast<double>(n) * spacing / target));
}

/// Continuous input coordinate of an output voxel center (voxel-center aligned).
inline double source_coord(int j, double target, double spacing) {
    return (static_cast<double>(j) + 0.5) * target / spacing - 0.5;
}

} // namespace detail

/// Resample image and mask onto an isotropic grid of the given spacing.
/// Intensities are interpolated trilinearly, labels nearest-neighbor.
inline std::pair<Volume, SegmentationMask> resample_isotropic(const Volume& image,
                                                              const SegmentationMask& mask,
                                                              double target_spacing) {
    if (!(target_spacing > 0.0))
        throw ValidationError("resample_isotropic: target spacing must be > 0");
    if (!(image.shape == mask.shape))
        throw ValidationError("resample_isotropic: image/mask shape mismatch");

    const Shape3 in = image.shape;
    const Spacing3 sp = image.spacing;
    Shape3 out_shape = {detail::resampled_extent(in.nx, sp.sx, target_spacing),
                        detail::resampled_extent(in.ny, sp.sy, target_spacing),
                        detail::resampled_extent(in.nz, sp.sz, target_spacing)};
    if (out_shape.nx < 1 || out_shape.ny < 1 || out_shape.nz < 1)
        throw ValidationError("resample_isotropic: output shape has a zero dimension");

    Volume out_img;
    out_img.shape = out_shape;
    out_img.spacing = {target_spacing, target_spacing, target_spacing};
    out_img.data.resize(out_shape.voxels());

    SegmentationMask out_mask;
    out_mask.shape = out_shape;
    out_mask.spacing = out_img.spacing;
    out_mask.num_classes = mask.num_classes;
    out_mask.labels.resize(out_shape.voxels());

    auto clampd = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };

    std::size_t i = 0;
    for (int z = 0; z < out_shape.nz; ++z) {
        double uz = clampd(detail::source_coord(z, target_spacing, sp.sz), 0.0, in.nz - 1.0);
        int z0 = static_cast<int>(uz);
        int z1 = std::min(z0 + 1, in.nz - 1);
        double fz = uz - z0;
        for (int y = 0; y < out_shape.ny; ++y) {
            double uy = clampd(detail::source_coord(y, target_spacing, sp.sy), 0.0, in.ny - 1.0);
            int y0 = static_cast<int>(uy);
            int y1 = std::min(y0 + 1, in.ny - 1);
            double fy = uy - y0;
            for (int x = 0; x < out_shape.nx; ++x, ++i) {
                double ux = clampd(detail::source_coord(x, target_spacing, sp.sx), 0.0, in.nx - 1.0);
                int x0 = static_cast<int>(ux);
                int x1 = std::min(x0 + 1, in.nx - 1);
                double fx = ux - x0;

                double c00 = image.at(x0, y0, z0) * (1 - fx) + image.at(x1, y0, z0) * fx;
                double c10 = image.at(x0, y1, z0) * (1 - fx) + image.at(x1, y1, z0) * fx;
                double c01 = image.at(x0, y0, z1) * (1 - fx) + image.at(x1, y0, z1) * fx;
                double c11 = image.at(x0, y1, z1) * (1 - fx) + image.at(x1, y1, z1) * fx;
                double c0 = c00 * (1 - fy) + c10 * fy;
                double c1 = c01 * (1 - fy) + c11 * fy;
                out_img.data[i] = static_cast<float>(c0 * (1 - fz) + c1 * fz);

                int nnx = static_cast<int>(clampd(std::llround(ux), 0, in.nx - 1));
                int nny = static_cast<int>(clampd(std::llround(uy), 0, in.ny - 1));
                int nnz = static_cast<int>(clampd(std::llround(uz), 0, in.nz - 1));
                out_mask.labels[i] = mask.at(nnx, nny, nnz);
            }
        }
    }
    return {std::move(out_img), std::move(out_mask)};
}

/// Zero-mean unit-std over foreground voxels (population convention);
/// background is set to 0.
inline Volume gaussian_standardize(const Volume& image, const SegmentationMask& mask) {
    if (!(image.shape == mask.shape))
        throw ValidationError("gaussian_standardize: image/mask shape mismatch");
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < image.data.size(); ++v)
        if (mask.labels[v] != 0) {
            sum += image.data[v];
            sum2 += static_cast<double>(image.data[v]) * image.data[v];
            ++n;
        }
    if (n < 2) throw ValidationError("gaussian_standardize: fewer than 2 foreground voxels");
    double mean = sum / static_cast<double>(n);
    double var = sum2 / static_cast<double>(n) - mean * mean;
    if (!(var > 0.0))
        throw ValidationError("gaussian_standardize: zero foreground intensity variance");
    double inv_std = 1.0 / std::sqrt(var);
    Volume out = image;
    for (std::size_t v = 0; v < out.data.size(); ++v)
        out.data[v] = mask.labels[v] != 0
                          ? static_cast<float>((image.data[v] - mean) * inv_std)
                          : 0.0f;
    return out;
}

/// Foreground-centered cubic patch with provenance.
struct Patch {
    Volume image;          // side^3 cube
    SegmentationMask mask; // matching label cube
    int domain = 1;
    int center_class = 0;                // class of the center voxel
    std::array<int, 3> origin = {0, 0, 0}; // corner coordinate in the source volume
    std::string source_id;

    int side() const { return image.shape.nx; }
};

/// All patches whose origin lies on the stride lattice, fits inside the
/// volume, and whose center voxel (origin + side/2 per axis) is foreground.
/// Output order is lexicographic by origin (x, then y, then z).
inline std::vector<Patch> extract_patches(const DomainSample& sample, int side, int stride) {
    const Shape3 sh = sample.image.shape;
    if (side < 1 || stride < 1)
        throw ValidationError("extract_patches: side and stride must be >= 1");
    if (sh.nx < side || sh.ny < side || sh.nz < side)
        throw ValidationError("extract_patches: volume " + sh.str() + " smaller than patch side " +
                              std::to_string(side));
    if (!(sample.image.shape == sample.mask.shape))
        throw ValidationError("extract_patches: image/mask shape mismatch");

    std::vector<Patch> out;
    const int half = side / 2;
    for (int ox = 0; ox + side <= sh.nx; ox += stride)
        for (int oy = 0; oy + side <= sh.ny; oy += stride)
            for (int oz = 0; oz + side <= sh.nz; oz += stride) {
                std::uint8_t center = sample.mask.at(ox + half, oy + half, oz + half);
                if (center == 0) continue;
                Patch p;
                p.image.shape = {side, side, side};
                p.image.spacing = sample.image.spacing;
                p.image.data.resize(p.image.shape.voxels());
                p.mask.shape = p.image.shape;
                p.mask.spacing = sample.mask.spacing;
                p.mask.num_classes = sample.mask.num_classes;
                p.mask.labels.resize(p.image.shape.voxels());
                std::size_t i = 0;
                for (int z = 0; z < side; ++z)
                    for (int y = 0; y < side; ++y)
                        for (int x = 0; x < side; ++x, ++i) {
                            p.image.data[i] = sample.image.at(ox + x, oy + y, oz + z);
                            p.mask.labels[i] = sample.mask.at(ox + x, oy + y, oz + z);
                        }
                p.domain = sample.domain;
                p.center_class = center;
                p.origin = {ox, oy, oz};
                p.source_id = sample.id;
                out.push_back(std::move(p));
            }
    return out;
}

enum class Split { Train, Validation, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        default: return "test";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    throw ValidationError("unknown split name '" + s + "'");
}

/// Result of the stratified shuffle split.
struct SplitAssignment {
    std::vector<Split> partition;                            // one entry per patch
    std::map<int, std::array<double, 3>> achieved_fractions; // per center class
};

/// Stratified shuffle split by center voxel class. Within every stratum the
/// partition sizes match the fractions to within one patch; the assignment is
/// a pure function of (patches, fractions, seed).
inline SplitAssignment stratified_split(const std::vector<Patch>& patches,
                                        const std::array<double, 3>& fractions,
                                        std::uint64_t seed) {
    double fsum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(fsum - 1.0) > 1e-9)
        throw ValidationError("stratified_split: fractions must sum to 1");
    for (double f : fractions)
        if (f < 0.0) throw ValidationError("stratified_split: negative fraction");

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < patches.size(); ++i)
        strata[patches[i].center_class].push_back(i);

    for (const auto& [cls, idx] : strata)
        if (idx.size() < 3)
            throw ValidationError("stratified_split: stratum for class " + std::to_string(cls) +
                                  " has only " + std::to_string(idx.size()) +
                                  " patches (need >= 3)");

    SplitAssignment out;
    out.partition.assign(patches.size(), Split::Test);
    for (auto& [cls, idx] : strata) {
        Rng rng = Rng::derive(seed, 0x53504c49ULL, static_cast<std::uint64_t>(cls));
        rng.shuffle(idx);
        std::size_t n = idx.size();
        auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
        auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
        n_train = std::min(n_train, n);
        n_val = std::min(n_val, n - n_train);
        for (std::size_t k = 0; k < n; ++k)
            out.partition[idx[k]] = k < n_train               ? Split::Train
                                    : (k < n_train + n_val) ? Split::Validation
                                                              : Split::Test;
        out.achieved_fractions[cls] = {static_cast<double>(n_train) / static_cast<double>(n),
                                       static_cast<double>(n_val) / static_cast<double>(n),
                                       static_cast<double>(n - n_train - n_val) /
                                           static_cast<double>(n)};
    }
    return out;
}

/// One patch-level prediction to merge back into a full volume.
struct PatchPrediction {
    std::array<int, 3> origin = {0, 0, 0};
    int side = 0;
    int num_classes = 0;
    std::vector<float> probs; // class-major: probs[c * side^3 + v]
};

/// Average all overlapping patch predictions per voxel and renormalize.
/// Voxels no patch covers get background with probability 1.
inline SoftSegmentation reconstruct_from_patches(const std::vector<PatchPrediction>& predictions,
                                                 const Shape3& full_shape, int num_classes) {
    if (num_classes < 2) throw ValidationError("reconstruct_from_patches: need >= 2 classes");
    const std::size_t n = full_shape.voxels();
    SoftSegmentation out;
    out.shape = full_shape;
    out.num_classes = num_classes;
    out.probs.assign(static_cast<std::size_t>(num_classes) * n, 0.0f);
    std::vector<double> acc(static_cast<std::size_t>(num_classes) * n, 0.0);
    std::vector<std::uint32_t> cover(n, 0);

    for (const auto& p : predictions) {
        if (p.num_classes != num_classes)
            throw ValidationError("reconstruct_from_patches: class count mismatch");
        const int s = p.side;
        const std::size_t cube = static_cast<std::size_t>(s) * s * s;
        if (p.probs.size() != cube * static_cast<std::size_t>(num_classes))
            throw ValidationError("reconstruct_from_patches: prediction size mismatch");
        if (p.origin[0] < 0 || p.origin[1] < 0 || p.origin[2] < 0 ||
            p.origin[0] + s > full_shape.nx || p.origin[1] + s > full_shape.ny ||
            p.origin[2] + s > full_shape.nz)
            throw ValidationError("reconstruct_from_patches: patch outside the volume");
        std::size_t i = 0;
        for (int z = 0; z < s; ++z)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x, ++i) {
                    std::size_t v = full_shape.index(p.origin[0] + x, p.origin[1] + y,
                                                     p.origin[2] + z);
                    ++cover[v];
                    for (int c = 0; c < num_classes; ++c)
                        acc[static_cast<std::size_t>(c) * n + v] +=
                            p.probs[static_cast<std::size_t>(c) * cube + i];
                }
    }

    for (std::size_t v = 0; v < n; ++v) {
        if (cover[v] == 0) {
            out.probs[v] = 1.0f; // background
            continue;
        }
        double total = 0.0;
        for (int c = 0; c < num_classes; ++c) total += acc[static_cast<std::size_t>(c) * n + v];
        if (!(total > 0.0)) {
            out.probs[v] = 1.0f;
            continue;
        }
        for (int c = 0; c < num_classes; ++c)
            out.probs[static_cast<std::size_t>(c) * n + v] =
                static_cast<float>(acc[static_cast<std::size_t>(c) * n + v] / total);
    }
    return out;
}

// --- Patch sets on disk: a directory of .mvol cubes plus an index JSON ---

struct PatchSet {
    int patch_size = 16;
    int stride = 8;
    int k_domains = 1;
    int num_classes = 2;
    double target_spacing = 1.0;
    bool standardized = false;
    std::uint64_t seed = 0;
    std::vector<Patch> patches;
    std::vector<Split> split;

    std::vector<std::size_t> indices_of(Split s, int domain = 0) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < patches.size(); ++i)
            if (split[i] == s && (domain == 0 || patches[i].domain == domain)) out.push_back(i);
        return out;
    }
};

inline constexpr const char* kPatchIndexName = "patches.json";

inline void save_patch_set(const PatchSet& set, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json j;
    j["magic"] = "advnorm-patches";
    j["version"] = 1;
    j["patch_size"] = set.patch_size;
    j["stride"] = set.stride;
    j["k_domains"] = set.k_domains;
    j["classes"] = set.num_classes;
    j["target_spacing"] = set.target_spacing;
    j["standardized"] = set.standardized;
    j["seed"] = set.seed;
    j["patches"] = ordered_json::array();
    for (std::size_t i = 0; i < set.patches.size(); ++i) {
        const Patch& p = set.patches[i];
        char id[16];
        std::snprintf(id, sizeof(id), "p%06zu", i);
        std::string img = std::string("img_") + id + ".mvol";
        std::string seg = std::string("seg_") + id + ".mvol";
        save_volume(p.image, dir / img);
        save_mask(p.mask, dir / seg);
        ordered_json e;
        e["id"] = id;
        e["image"] = img;
        e["mask"] = seg;
        e["domain"] = p.domain;
        e["center_class"] = p.center_class;
        e["origin"] = {p.origin[0], p.origin[1], p.origin[2]};
        e["source"] = p.source_id;
        e["split"] = split_name(set.split[i]);
        j["patches"].push_back(e);
    }
    std::ofstream out(dir / kPatchIndexName, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write patch index in '" + dir.string() + "'");
    out << j.dump(2) << "\n";
}

inline PatchSet load_patch_set(const std::filesystem::path& dir) {
    std::ifstream in(dir / kPatchIndexName, std::ios::binary);
    if (!in) throw ValidationError("cannot open patch index in '" + dir.string() + "'");
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("patch index: " + std::string(e.what()));
    }
    if (j.value("magic", "") != "advnorm-patches")
        throw FormatError("'" + dir.string() + "': not a patch index");
    PatchSet set;
    set.patch_size = j.value("patch_size", 0);
    set.stride = j.value("stride", 0);
    set.k_domains = j.value("k_domains", 0);
    set.num_classes = j.value("classes", 0);
    set.target_spacing = j.value("target_spacing", 1.0);
    set.standardized = j.value("standardized", false);
    set.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("patches")) {
        Patch p;
        p.image = load_volume(dir / e.at("image").get<std::string>());
        p.mask = load_mask(dir / e.at("mask").get<std::string>());
        p.domain = e.value("domain", 1);
        p.center_class = e.value("center_class", 0);
        auto o = e.at("origin");
        p.origin = {o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<int>()};
        p.source_id = e.value("source", "");
        set.patches.push_back(std::move(p));
        set.split.push_back(split_from_name(e.at("split").get<std::string>()));
    }
    return set;
}

/// Preprocessing settings for turning a dataset into a patch set.
struct PipelineConfig {
    int patch_size = 16; // desk-scale default; 32 matches the clinical setting
    int stride = 8;
    double target_spacing = 1.0;
    std::array<double, 3> split_fractions = {0.6, 0.2, 0.2};
    bool standardize = false; // gaussian-standardize foreground before patching

    void validate() const {
        if (patch_size < 2) throw ValidationError("pipeline: patch_size must be >= 2");
        if (stride < 1) throw ValidationError("pipeline: stride must be >= 1");
        if (!(target_spacing > 0)) throw ValidationError("pipeline: target_spacing must be > 0");
        double s = split_fractions[0] + split_fractions[1] + split_fractions[2];
        if (std::abs(s - 1.0) > 1e-9)
            throw ValidationError("pipeline: split fractions must sum to 1");
    }
};

inline void to_json(ordered_json& j, const PipelineConfig& c) {
    j = ordered_json{{"patch_size", c.patch_size},
                     {"stride", c.stride},
                     {"target_spacing", c.target_spacing},
                     {"split", {c.split_fractions[0], c.split_fractions[1], c.split_fractions[2]}},
                     {"standardize", c.standardize}};
}

inline void from_json(const ordered_json& j, PipelineConfig& c) {
    c = PipelineConfig{};
    c.patch_size = j.value("patch_size", c.patch_size);
    c.stride = j.value("stride", c.stride);
    c.target_spacing = j.value("target_spacing", c.target_spacing);
    if (j.contains("split")) {
        auto s = j.at("split");
        c.split_fractions = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    }
    c.standardize = j.value("standardize", c.standardize);
}

/// Full preprocessing of one dataset: skull strip, resample to isotropic
/// spacing, optionally standardize, extract foreground-centered patches from
/// every sample, then split them by center voxel class.
inline PatchSet preprocess_dataset(const std::filesystem::path& manifest_dir,
                                   const DatasetManifest& manifest, const PipelineConfig& cfg,
                                   std::uint64_t seed) {
    cfg.validate();
    PatchSet set;
    set.patch_size = cfg.patch_size;
    set.stride = cfg.stride;
    set.k_domains = manifest.k_domains;
    set.num_classes = manifest.num_classes;
    set.target_spacing = cfg.target_spacing;
    set.standardized = cfg.standardize;
    set.seed = seed;

    for (const auto& ref : manifest.samples) {
        DomainSample sample = load_sample(manifest_dir, ref);
        sample.image = skull_strip(sample.image, sample.mask);
        auto [img, mask] = resample_isotropic(sample.image, sample.mask, cfg.target_spacing);
        if (cfg.standardize) img = gaussian_standardize(img, mask);
        DomainSample prepped;
        prepped.image = std::move(img);
        prepped.mask = std::move(mask);
        prepped.domain = sample.domain;
        prepped.id = sample.id;
        auto patches = extract_patches(prepped, cfg.patch_size, cfg.stride);
        for (auto& p : patches) set.patches.push_back(std::move(p));
    }

    SplitAssignment split = stratified_split(set.patches, cfg.split_fractions, seed);
    set.split = std::move(split.partition);
    return set;
}

} // namespace advnorm
