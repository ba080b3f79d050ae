#pragma once

// Shared builders and numeric helpers for the test suites.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advnorm/nn.hpp"
#include "advnorm/rng.hpp"
#include "advnorm/volume.hpp"

namespace testutil {

inline advnorm::Volume make_volume(int nx, int ny, int nz, float value = 0.0f,
                                   advnorm::Spacing3 spacing = {1.0, 1.0, 1.0}) {
    advnorm::Volume v;
    v.shape = {nx, ny, nz};
    v.spacing = spacing;
    v.data.assign(v.shape.voxels(), value);
    return v;
}

inline advnorm::SegmentationMask make_mask(int nx, int ny, int nz, int num_classes,
                                           std::uint8_t fill = 0,
                                           advnorm::Spacing3 spacing = {1.0, 1.0, 1.0}) {
    advnorm::SegmentationMask m;
    m.shape = {nx, ny, nz};
    m.spacing = spacing;
    m.num_classes = num_classes;
    m.labels.assign(m.shape.voxels(), fill);
    return m;
}

template <typename T>
void fill_uniform(advnorm::nn::Tensor<T>& t, advnorm::Rng& rng, double lo = -1.0,
                  double hi = 1.0) {
    for (auto& v : t.v) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_uniform(std::vector<T>& v, advnorm::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
}

inline double rel_err(double analytic, double numeric) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Scratch directory per test, wiped up front so reruns start clean.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "advnorm_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testutil
