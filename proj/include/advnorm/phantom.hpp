#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/hash.hpp"
#include "advnorm/mvol_io.hpp"
#include "advnorm/parallel.hpp"
#include "advnorm/rng.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

/// Intensity model of one acquisition domain.
struct DomainSpec {
    std::string name;
    std::vector<double> class_means; // one per class, class 0 = background
    std::vector<double> class_stds;
    double bias_field_amplitude = 0.0; // multiplicative field strength in [0, 1)
    Spacing3 spacing;
    double contrast_overlap = 0.0; // 1.0 pulls the two innermost tissue means together

    void validate() const {
        if (class_means.size() < 2) throw ValidationError("DomainSpec: need >= 2 class means");
        if (class_stds.size() != class_means.size())
            throw ValidationError("DomainSpec: class_stds/class_means size mismatch");
        for (double m : class_means)
            if (!std::isfinite(m)) throw ValidationError("DomainSpec: non-finite class mean");
        for (double s : class_stds)
            if (!(s >= 0.0) || !std::isfinite(s))
                throw ValidationError("DomainSpec: class stds must be >= 0");
        if (!(bias_field_amplitude >= 0.0 && bias_field_amplitude < 1.0))
            throw ValidationError("DomainSpec: bias_field_amplitude outside [0, 1)");
        if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0))
            throw ValidationError("DomainSpec: spacing must be > 0");
        if (!(contrast_overlap >= 0.0 && contrast_overlap <= 1.0))
            throw ValidationError("DomainSpec: contrast_overlap outside [0, 1]");
    }

    /// Means after applying the contrast overlap: the two innermost tissue
    /// classes move toward their midpoint, meeting exactly at overlap = 1.
    std::vector<double> effective_means() const {
        std::vector<double> m = class_means;
        std::size_t c = m.size();
        if (c >= 3 && contrast_overlap > 0.0) {
            double mid = 0.5 * (m[c - 2] + m[c - 1]);
            m[c - 2] += contrast_overlap * (mid - m[c - 2]);
            m[c - 1] += contrast_overlap * (mid - m[c - 1]);
        }
        return m;
    }
};

/// Nested-ellipsoid label geometry. Fractions are of the half-extent per
/// axis, ordered outermost shell (class 1) to innermost (class C-1).
struct PhantomGeometry {
    std::vector<double> shell_fractions = {0.80, 0.62, 0.40};
    double center_jitter = 0.04; // fraction of the extent
    double radius_jitter = 0.06; // relative radius perturbation

    void validate(std::size_t num_classes) const {
        if (shell_fractions.size() + 1 != num_classes)
            throw ValidationError("PhantomGeometry: need C-1 shell fractions");
        double prev = 1.0;
        for (double f : shell_fractions) {
            if (!(f > 0.0 && f < 1.0))
                throw ValidationError("PhantomGeometry: shell fractions must be in (0, 1)");
            if (!(f < prev))
                throw ValidationError("PhantomGeometry: shell fractions must decrease outward-in");
            prev = f;
        }
        if (!(center_jitter >= 0.0 && center_jitter < 0.5))
            throw ValidationError("PhantomGeometry: center_jitter outside [0, 0.5)");
        if (!(radius_jitter >= 0.0 && radius_jitter < 1.0))
            throw ValidationError("PhantomGeometry: radius_jitter outside [0, 1)");
    }
};

struct PhantomConfig {
    Shape3 shape = {32, 32, 32};
    int volumes_per_domain = 5;
    std::uint64_t seed = 42;
    PhantomGeometry geometry;
    std::vector<DomainSpec> domains;

    int k_domains() const { return static_cast<int>(domains.size()); }
    int num_classes() const {
        return domains.empty() ? 0 : static_cast<int>(domains.front().class_means.size());
    }

    void validate() const {
        if (shape.nx < 2 || shape.ny < 2 || shape.nz < 2)
            throw ValidationError("PhantomConfig: shape too small");
        if (volumes_per_domain < 1)
            throw ValidationError("PhantomConfig: volumes_per_domain must be >= 1");
        if (domains.empty()) throw ValidationError("PhantomConfig: need at least one domain");
        for (const auto& d : domains) {
            d.validate();
            if (static_cast<int>(d.class_means.size()) != num_classes())
                throw ValidationError("PhantomConfig: domains disagree on class count");
        }
        geometry.validate(static_cast<std::size_t>(num_classes()));
    }
};

/// Two stock domains mirroring the usual axes of difficulty: an "infant-like"
/// one with low tissue contrast on an isotropic grid, and an "adult-like" one
/// with high contrast, a brighter disjoint intensity range, a stronger bias
/// field and anisotropic spacing. Cross-domain testing genuinely fails on
/// these, which is the effect the trainer is supposed to repair.
inline PhantomConfig default_phantom_config() {
    PhantomConfig cfg;
    cfg.shape = {32, 32, 32};
    cfg.volumes_per_domain = 5;
    cfg.seed = 42;

    DomainSpec infant;
    infant.name = "infant_like";
    infant.class_means = {0.0, 0.90, 0.45, 0.60};
    infant.class_stds = {0.01, 0.03, 0.03, 0.03};
    infant.bias_field_amplitude = 0.05;
    infant.spacing = {1.0, 1.0, 1.0};
    infant.contrast_overlap = 0.70;

    DomainSpec adult;
    adult.name = "adult_like";
    adult.class_means = {0.0, 1.60, 2.60, 3.40};
    adult.class_stds = {0.01, 0.08, 0.08, 0.08};
    adult.bias_field_amplitude = 0.15;
    adult.spacing = {0.958, 0.958, 3.0};
    adult.contrast_overlap = 0.10;

    cfg.domains = {infant, adult};
    return cfg;
}

namespace detail {

struct EllipsoidDraw {
    double cx, cy, cz;
    std::vector<double> rx, ry, rz; // per shell
};

inline EllipsoidDraw draw_geometry(const PhantomConfig& cfg, Rng& rng) {
    const auto& g = cfg.geometry;
    EllipsoidDraw d;
    d.cx = 0.5 * cfg.shape.nx + g.center_jitter * cfg.shape.nx * rng.uniform(-1.0, 1.0);
    d.cy = 0.5 * cfg.shape.ny + g.center_jitter * cfg.shape.ny * rng.uniform(-1.0, 1.0);
    d.cz = 0.5 * cfg.shape.nz + g.center_jitter * cfg.shape.nz * rng.uniform(-1.0, 1.0);
    for (double f : g.shell_fractions) {
        double jx = 1.0 + g.radius_jitter * rng.uniform(-1.0, 1.0);
        double jy = 1.0 + g.radius_jitter * rng.uniform(-1.0, 1.0);
        double jz = 1.0 + g.radius_jitter * rng.uniform(-1.0, 1.0);
        d.rx.push_back(f * 0.5 * cfg.shape.nx * jx);
        d.ry.push_back(f * 0.5 * cfg.shape.ny * jy);
        d.rz.push_back(f * 0.5 * cfg.shape.nz * jz);
    }
    return d;
}

/// exp of the mean of three separable low-frequency cosine modes.
inline std::vector<float> draw_bias_field(const Shape3& shape, double amplitude, Rng& rng) {
    constexpr int kModes = 3;
    std::vector<double> cx(static_cast<std::size_t>(kModes) * shape.nx);
    std::vector<double> cy(static_cast<std::size_t>(kModes) * shape.ny);
    std::vector<double> cz(static_cast<std::size_t>(kModes) * shape.nz);
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (int k = 0; k < kModes; ++k) {
        // frequencies in {1, 2} periods per extent keep the field smooth
        double fx = 1.0 + static_cast<double>(rng.below(2));
        double fy = 1.0 + static_cast<double>(rng.below(2));
        double fz = 1.0 + static_cast<double>(rng.below(2));
        double px = rng.uniform(0.0, two_pi);
        double py = rng.uniform(0.0, two_pi);
        double pz = rng.uniform(0.0, two_pi);
        for (int x = 0; x < shape.nx; ++x)
            cx[static_cast<std::size_t>(k) * shape.nx + x] =
                std::cos(two_pi * fx * (x + 0.5) / shape.nx + px);
        for (int y = 0; y < shape.ny; ++y)
            cy[static_cast<std::size_t>(k) * shape.ny + y] =
                std::cos(two_pi * fy * (y + 0.5) / shape.ny + py);
        for (int z = 0; z < shape.nz; ++z)
            cz[static_cast<std::size_t>(k) * shape.nz + z] =
                std::cos(two_pi * fz * (z + 0.5) / shape.nz + pz);
    }
    std::vector<float> field(shape.voxels());
    std::size_t i = 0;
    for (int z = 0; z < shape.nz; ++z)
        for (int y = 0; y < shape.ny; ++y)
            for (int x = 0; x < shape.nx; ++x, ++i) {
                double s = 0.0;
                for (int k = 0; k < kModes; ++k)
                    s += cx[static_cast<std::size_t>(k) * shape.nx + x] *
                         cy[static_cast<std::size_t>(k) * shape.ny + y] *
                         cz[static_cast<std::size_t>(k) * shape.nz + z];
                field[i] = static_cast<float>(std::exp(amplitude * s / kModes));
            }
    return field;
}

} // namespace detail

/// Generate one sample of the given domain. Intensity at a voxel is drawn
/// from its label's class distribution and multiplied by a smooth positive
/// bias field; labels are nested ellipsoids with jittered center and radii.
/// The noise stream is consumed identically for every sigma value, so runs
/// that differ only in class_stds share geometry, bias field and noise draws.
inline DomainSample generate_phantom(const PhantomConfig& cfg, int domain, Rng& rng) {
    cfg.validate();
    if (domain < 1 || domain > cfg.k_domains())
        throw ValidationError("generate_phantom: domain outside [1, K]");
    const DomainSpec& spec = cfg.domains[static_cast<std::size_t>(domain - 1)];
    const int num_classes = cfg.num_classes();
    const std::size_t n = cfg.shape.voxels();

    SegmentationMask mask;
    mask.shape = cfg.shape;
    mask.spacing = spec.spacing;
    mask.num_classes = num_classes;
    mask.labels.assign(n, 0);

    bool ok = false;
    for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
        detail::EllipsoidDraw geo = detail::draw_geometry(cfg, rng);
        std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
        std::size_t i = 0;
        for (int z = 0; z < cfg.shape.nz; ++z)
            for (int y = 0; y < cfg.shape.ny; ++y)
                for (int x = 0; x < cfg.shape.nx; ++x, ++i) {
                    double dx = x + 0.5 - geo.cx;
                    double dy = y + 0.5 - geo.cy;
                    double dz = z + 0.5 - geo.cz;
                    std::uint8_t label = 0;
                    for (std::size_t s = 0; s < geo.rx.size(); ++s) {
                        double q = (dx / geo.rx[s]) * (dx / geo.rx[s]) +
                                   (dy / geo.ry[s]) * (dy / geo.ry[s]) +
                                   (dz / geo.rz[s]) * (dz / geo.rz[s]);
                        if (q <= 1.0) label = static_cast<std::uint8_t>(s + 1);
                    }
                    mask.labels[i] = label;
                    ++counts[label];
                }
        ok = true;
        for (std::size_t c = 0; c < counts.size(); ++c)
            if (counts[c] == 0) ok = false;
    }
    if (!ok)
        throw ValidationError("generate_phantom: geometry left a class empty after 10 attempts");

    std::vector<float> bias = detail::draw_bias_field(cfg.shape, spec.bias_field_amplitude, rng);

    Volume img;
    img.shape = cfg.shape;
    img.spacing = spec.spacing;
    img.data.resize(n);
    const std::vector<double> means = spec.effective_means();
    for (std::size_t i = 0; i < n; ++i) {
        double xi = rng.normal(); // always drawn; keeps streams aligned across sigma
        std::size_t c = mask.labels[i];
        img.data[i] = static_cast<float>(bias[i] * (means[c] + spec.class_stds[c] * xi));
    }

    DomainSample sample;
    sample.image = std::move(img);
    sample.mask = std::move(mask);
    sample.domain = domain;
    return sample;
}

inline std::string phantom_sample_id(int domain, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "d%d_s%03d", domain, index);
    return buf;
}

/// Write K * volumes_per_domain samples plus a manifest into out_dir.
/// Generation is a pure function of the config: every sample derives its RNG
/// stream from (seed, domain, index), so reruns are byte-identical and the
/// per-sample work can run in parallel.
inline DatasetManifest generate_domain_dataset(const PhantomConfig& cfg,
                                               const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.k_domains = cfg.k_domains();
    manifest.num_classes = cfg.num_classes();
    manifest.seed = cfg.seed;
    manifest.provenance = "advnorm phantom generator (nested ellipsoids), seed " +
                          std::to_string(cfg.seed);

    struct Job {
        int domain;
        int index;
        SampleRef ref;
    };
    std::vector<Job> jobs;
    for (int d = 1; d <= cfg.k_domains(); ++d)
        for (int s = 0; s < cfg.volumes_per_domain; ++s) {
            Job j;
            j.domain = d;
            j.index = s;
            j.ref.id = phantom_sample_id(d, s);
            j.ref.image_path = "img_" + j.ref.id + ".mvol";
            j.ref.mask_path = "seg_" + j.ref.id + ".mvol";
            j.ref.domain = d;
            jobs.push_back(std::move(j));
        }

    std::vector<std::filesystem::path> written(jobs.size() * 2);
    try {
        parallel_for(jobs.size(), [&](std::size_t i) {
            const Job& j = jobs[i];
            Rng rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(j.domain),
                                  static_cast<std::uint64_t>(j.index));
            DomainSample sample = generate_phantom(cfg, j.domain, rng);
            std::filesystem::path img = out_dir / j.ref.image_path;
            std::filesystem::path seg = out_dir / j.ref.mask_path;
            save_volume(sample.image, img);
            written[2 * i] = img;
            save_mask(sample.mask, seg);
            written[2 * i + 1] = seg;
        });
    } catch (...) {
        // partial dataset is worse than none
        std::error_code ec;
        for (const auto& p : written)
            if (!p.empty()) std::filesystem::remove(p, ec);
        throw;
    }

    for (auto& j : jobs) manifest.samples.push_back(std::move(j.ref));
    save_manifest(manifest, out_dir / kManifestName);
    return manifest;
}

// --- JSON (de)serialization of the phantom configuration ---

inline void to_json(ordered_json& j, const DomainSpec& d) {
    j = ordered_json{{"name", d.name},
                     {"class_means", d.class_means},
                     {"class_stds", d.class_stds},
                     {"bias_field_amplitude", d.bias_field_amplitude},
                     {"spacing", {d.spacing.sx, d.spacing.sy, d.spacing.sz}},
                     {"contrast_overlap", d.contrast_overlap}};
}

inline void from_json(const ordered_json& j, DomainSpec& d) {
    d.name = j.value("name", "");
    d.class_means = j.at("class_means").get<std::vector<double>>();
    d.class_stds = j.at("class_stds").get<std::vector<double>>();
    d.bias_field_amplitude = j.value("bias_field_amplitude", 0.0);
    auto sp = j.at("spacing");
    d.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    d.contrast_overlap = j.value("contrast_overlap", 0.0);
}

inline void to_json(ordered_json& j, const PhantomGeometry& g) {
    j = ordered_json{{"shell_fractions", g.shell_fractions},
                     {"center_jitter", g.center_jitter},
                     {"radius_jitter", g.radius_jitter}};
}

inline void from_json(const ordered_json& j, PhantomGeometry& g) {
    g.shell_fractions = j.value("shell_fractions", g.shell_fractions);
    g.center_jitter = j.value("center_jitter", g.center_jitter);
    g.radius_jitter = j.value("radius_jitter", g.radius_jitter);
}

inline void to_json(ordered_json& j, const PhantomConfig& c) {
    j = ordered_json{{"shape", {c.shape.nx, c.shape.ny, c.shape.nz}},
                     {"volumes_per_domain", c.volumes_per_domain},
                     {"seed", c.seed},
                     {"geometry", c.geometry},
                     {"domains", c.domains}};
}

inline void from_json(const ordered_json& j, PhantomConfig& c) {
    c = PhantomConfig{};
    c.domains.clear();
    if (j.contains("shape")) {
        auto s = j.at("shape");
        c.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    }
    c.volumes_per_domain = j.value("volumes_per_domain", c.volumes_per_domain);
    c.seed = j.value("seed", c.seed);
    if (j.contains("geometry")) c.geometry = j.at("geometry").get<PhantomGeometry>();
    if (j.contains("domains"))
        c.domains = j.at("domains").get<std::vector<DomainSpec>>();
    else
        c.domains = default_phantom_config().domains;
}

} // namespace advnorm
