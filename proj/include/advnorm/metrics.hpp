#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "advnorm/errors.hpp"
#include "advnorm/nn.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

/// Hard label map from per-voxel class probabilities (ties resolve to the
/// lowest class index).
template <typename T>
std::vector<std::uint8_t> argmax_labels(const nn::Tensor<T>& probs) {
    std::vector<std::uint8_t> out(probs.spatial(), 0);
    for (std::size_t v = 0; v < out.size(); ++v) {
        int best = 0;
        T best_p = probs.plane(0)[v];
        for (int c = 1; c < probs.ch; ++c)
            if (probs.plane(c)[v] > best_p) {
                best_p = probs.plane(c)[v];
                best = c;
            }
        out[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

struct ClassDice {
    double dice = 0.0;
    // True when neither prediction nor truth contained the class anywhere;
    // the score is defined as 1 in that case.
    bool both_empty = false;
};

/// Micro-aggregated hard Dice: intersections and masses are summed over all
/// added items before the ratio is taken, so large and small patches weigh
/// by voxel count.
class DiceAccumulator {
public:
    explicit DiceAccumulator(int num_classes)
        : inter_(static_cast<std::size_t>(num_classes), 0.0),
          pred_mass_(static_cast<std::size_t>(num_classes), 0.0),
          true_mass_(static_cast<std::size_t>(num_classes), 0.0) {}

    void add(const std::uint8_t* pred, const std::uint8_t* truth, std::size_t n) {
        for (std::size_t v = 0; v < n; ++v) {
            pred_mass_[pred[v]] += 1.0;
            true_mass_[truth[v]] += 1.0;
            if (pred[v] == truth[v]) inter_[pred[v]] += 1.0;
        }
    }

    std::vector<ClassDice> per_class() const {
        std::vector<ClassDice> out(inter_.size());
        for (std::size_t c = 0; c < inter_.size(); ++c) {
            const double denom = pred_mass_[c] + true_mass_[c];
            if (denom == 0.0) {
                out[c].dice = 1.0;
                out[c].both_empty = true;
            } else {
                out[c].dice = 2.0 * inter_[c] / denom;
            }
        }
        return out;
    }

    /// Mean over the non-background classes (1..C-1).
    double mean_foreground() const {
        auto pc = per_class();
        double sum = 0.0;
        for (std::size_t c = 1; c < pc.size(); ++c) sum += pc[c].dice;
        return pc.size() > 1 ? sum / static_cast<double>(pc.size() - 1) : 0.0;
    }

    int num_classes() const { return static_cast<int>(inter_.size()); }

private:
    std::vector<double> inter_, pred_mass_, true_mass_;
};

struct Histogram {
    double lo = 0.0, hi = 1.0;
    std::vector<double> mass; // sums to 1 once any value was added

    double bin_center(std::size_t b) const {
        const double width = (hi - lo) / static_cast<double>(mass.size());
        return lo + (static_cast<double>(b) + 0.5) * width;
    }
};

/// Normalized histogram over [lo, hi]; values outside clamp into the edge
/// bins. A degenerate range (hi == lo) puts all mass in bin zero.
inline Histogram make_histogram(const std::vector<float>& values, double lo, double hi, int bins) {
    if (bins < 1) throw ValidationError("histogram: needs at least one bin");
    if (hi < lo) throw ValidationError("histogram: hi must be >= lo");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.mass.assign(static_cast<std::size_t>(bins), 0.0);
    if (values.empty()) return h;
    const double width = (hi - lo) / bins;
    for (float v : values) {
        std::size_t b = 0;
        if (width > 0.0) {
            double f = (static_cast<double>(v) - lo) / width;
            if (f < 0.0) f = 0.0;
            b = static_cast<std::size_t>(f);
            if (b >= h.mass.size()) b = h.mass.size() - 1;
        }
        h.mass[b] += 1.0;
    }
    for (double& m : h.mass) m /= static_cast<double>(values.size());
    return h;
}

/// Generalized Jensen-Shannon divergence of N equally weighted histograms
/// over identical bins, in nats:
///   (1/N) sum_i KL(h_i || mean)
/// Each histogram is smoothed additively by 1e-12 and renormalized first.
/// The value is bounded above by ln N and is 0 iff all inputs agree.
inline double jsd(const std::vector<Histogram>& hs) {
    if (hs.size() < 2) throw ValidationError("jsd: needs at least two histograms");
    const std::size_t bins = hs[0].mass.size();
    for (const auto& h : hs) {
        if (h.mass.size() != bins) throw ValidationError("jsd: histograms have differing bins");
        if (h.lo != hs[0].lo || h.hi != hs[0].hi)
            throw ValidationError("jsd: histograms cover differing ranges");
    }
    std::vector<std::vector<double>> p(hs.size(), std::vector<double>(bins));
    for (std::size_t i = 0; i < hs.size(); ++i) {
        double total = 0.0;
        for (std::size_t b = 0; b < bins; ++b) {
            p[i][b] = hs[i].mass[b] + 1e-12;
            total += p[i][b];
        }
        for (std::size_t b = 0; b < bins; ++b) p[i][b] /= total;
    }
    std::vector<double> mean(bins, 0.0);
    for (const auto& pi : p)
        for (std::size_t b = 0; b < bins; ++b) mean[b] += pi[b];
    for (double& m : mean) m /= static_cast<double>(p.size());
    double acc = 0.0;
    for (const auto& pi : p)
        for (std::size_t b = 0; b < bins; ++b)
            acc += pi[b] * std::log(pi[b] / mean[b]);
    return acc / static_cast<double>(p.size());
}

/// Intensities of voxels the mask marks as any foreground class.
inline std::vector<float> foreground_intensities(const Volume& img, const SegmentationMask& mask) {
    if (img.data.size() != mask.labels.size())
        throw ValidationError("foreground_intensities: image and mask sizes differ");
    std::vector<float> out;
    for (std::size_t v = 0; v < img.data.size(); ++v)
        if (mask.labels[v] != 0) out.push_back(img.data[v]);
    return out;
}

/// Histogram-population divergence of several intensity sets: one histogram
/// per set, binned over the global min/max of all sets together.
inline double population_jsd(const std::vector<std::vector<float>>& sets, int bins = 100) {
    if (sets.size() < 2) throw ValidationError("population_jsd: needs at least two sets");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& s : sets)
        for (float v : s) {
            lo = std::min(lo, static_cast<double>(v));
            hi = std::max(hi, static_cast<double>(v));
        }
    if (!std::isfinite(lo) || !std::isfinite(hi))
        throw ValidationError("population_jsd: all sets are empty");
    std::vector<Histogram> hs;
    hs.reserve(sets.size());
    for (const auto& s : sets) hs.push_back(make_histogram(s, lo, hi, bins));
    return jsd(hs);
}

} // namespace advnorm
