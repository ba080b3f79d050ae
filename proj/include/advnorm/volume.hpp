#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "advnorm/errors.hpp"

namespace advnorm {

/// Grid dimensions, x fastest in memory: flat = x + nx*(y + ny*z).
struct Shape3 {
    int nx = 0, ny = 0, nz = 0;

    std::size_t voxels() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
               static_cast<std::size_t>(nz);
    }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(nx) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
    }
    bool operator==(const Shape3&) const = default;
    std::string str() const {
        return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
    }
};

/// Voxel spacing in millimetres, one entry per axis.
struct Spacing3 {
    double sx = 1.0, sy = 1.0, sz = 1.0;
    bool operator==(const Spacing3&) const = default;
};

/// A 3-D scalar intensity grid with physical voxel spacing.
struct Volume {
    Shape3 shape;
    Spacing3 spacing;
    std::vector<float> data; // x fastest

    float at(int x, int y, int z) const { return data[shape.index(x, y, z)]; }
    float& at(int x, int y, int z) { return data[shape.index(x, y, z)]; }

    void validate() const {
        if (shape.nx <= 0 || shape.ny <= 0 || shape.nz <= 0)
            throw ValidationError("Volume: non-positive shape " + shape.str());
        if (!(spacing.sx > 0.0) || !(spacing.sy > 0.0) || !(spacing.sz > 0.0))
            throw ValidationError("Volume: spacing components must be > 0");
        if (data.size() != shape.voxels())
            throw ValidationError("Volume: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape.str());
        for (float v : data)
            if (!std::isfinite(v)) throw ValidationError("Volume: non-finite intensity");
    }
};

/// Per-voxel hard labels in {0..C-1}; class 0 is background.
struct SegmentationMask {
    Shape3 shape;
    Spacing3 spacing;
    int num_classes = 0;
    std::vector<std::uint8_t> labels; // x fastest

    std::uint8_t at(int x, int y, int z) const { return labels[shape.index(x, y, z)]; }
    std::uint8_t& at(int x, int y, int z) { return labels[shape.index(x, y, z)]; }

    void validate() const {
        if (shape.nx <= 0 || shape.ny <= 0 || shape.nz <= 0)
            throw ValidationError("SegmentationMask: non-positive shape " + shape.str());
        if (num_classes < 2 || num_classes > 256)
            throw ValidationError("SegmentationMask: class count must be in [2, 256]");
        if (labels.size() != shape.voxels())
            throw ValidationError("SegmentationMask: label length does not match shape");
        for (std::uint8_t l : labels)
            if (l >= num_classes)
                throw ValidationError("SegmentationMask: label " + std::to_string(l) +
                                      " >= C=" + std::to_string(num_classes));
    }

    /// One-hot expansion, class-major; sums to exactly 1 over classes per voxel.
    std::vector<float> one_hot() const {
        std::vector<float> out(static_cast<std::size_t>(num_classes) * labels.size(), 0.0f);
        for (std::size_t v = 0; v < labels.size(); ++v)
            out[static_cast<std::size_t>(labels[v]) * labels.size() + v] = 1.0f;
        return out;
    }
};

/// A training triple: image, expert mask, and the domain the image came from.
/// Domains are 1-based, matching the discriminator's real classes {1..K}.
struct DomainSample {
    Volume image;
    SegmentationMask mask;
    int domain = 1;
    std::string id;

    void validate(int k_domains) const {
        image.validate();
        mask.validate();
        if (!(image.shape == mask.shape))
            throw ValidationError("DomainSample: image/mask shape mismatch");
        if (domain < 1 || domain > k_domains)
            throw ValidationError("DomainSample: domain " + std::to_string(domain) +
                                  " outside [1, " + std::to_string(k_domains) + "]");
    }
};

/// Per-voxel class distribution over a full grid, class-major storage:
/// probs[c * voxels + v].
struct SoftSegmentation {
    Shape3 shape;
    int num_classes = 0;
    std::vector<float> probs;

    float at(int c, std::size_t v) const {
        return probs[static_cast<std::size_t>(c) * shape.voxels() + v];
    }
};

/// One entry of a DatasetManifest: file references plus the domain label.
struct SampleRef {
    std::string id;
    std::string image_path; // relative to the manifest directory
    std::string mask_path;
    int domain = 1;
};

/// Index of a generated dataset on disk.
struct DatasetManifest {
    int k_domains = 0;
    int num_classes = 0;
    std::uint64_t seed = 0;
    std::string provenance;
    std::vector<SampleRef> samples;

    void validate() const {
        if (k_domains < 1) throw ValidationError("DatasetManifest: K must be >= 1");
        if (num_classes < 2) throw ValidationError("DatasetManifest: C must be >= 2");
        for (const auto& s : samples)
            if (s.domain < 1 || s.domain > k_domains)
                throw ValidationError("DatasetManifest: sample '" + s.id +
                                      "' has domain outside [1, K]");
    }
};

} // namespace advnorm
