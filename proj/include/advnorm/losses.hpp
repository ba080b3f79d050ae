#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/nn.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

// Probabilities below this are clamped inside logs and their gradients
// zeroed, so a collapsed discriminator output cannot produce inf/nan.
inline constexpr double kProbFloor = 1e-12;

struct LossConfig {
    double lambda = 1.0;
    double epsilon = 1e-8;
    // "inverse_frequency" or "uniform"; explicit_weights overrides either.
    std::string class_weights = "inverse_frequency";
    std::vector<double> explicit_weights;

    void validate() const {
        if (!(lambda >= 0.0)) throw ValidationError("loss: lambda must be >= 0");
        if (!(epsilon >= 0.0)) throw ValidationError("loss: epsilon must be >= 0");
        if (class_weights != "inverse_frequency" && class_weights != "uniform")
            throw ValidationError("loss: class_weights must be inverse_frequency or uniform");
        for (double w : explicit_weights)
            if (!(w >= 0.0)) throw ValidationError("loss: explicit weights must be >= 0");
    }
};

inline void to_json(nlohmann::ordered_json& j, const LossConfig& c) {
    j = nlohmann::ordered_json{{"lambda", c.lambda},
                               {"epsilon", c.epsilon},
                               {"class_weights", c.class_weights}};
    if (!c.explicit_weights.empty()) j["explicit_weights"] = c.explicit_weights;
}

inline void from_json(const nlohmann::ordered_json& j, LossConfig& c) {
    c = LossConfig{};
    if (j.contains("lambda")) j.at("lambda").get_to(c.lambda);
    if (j.contains("epsilon")) j.at("epsilon").get_to(c.epsilon);
    if (j.contains("class_weights")) j.at("class_weights").get_to(c.class_weights);
    if (j.contains("explicit_weights"))
        c.explicit_weights = j.at("explicit_weights").get<std::vector<double>>();
}

/// One-hot encoding of a label mask as a class-major tensor.
template <typename T>
nn::Tensor<T> mask_to_onehot(const SegmentationMask& mask) {
    nn::Tensor<T> out(mask.num_classes, static_cast<int>(mask.shape.nx),
                      static_cast<int>(mask.shape.ny), static_cast<int>(mask.shape.nz));
    for (std::size_t v = 0; v < mask.labels.size(); ++v)
        out.plane(mask.labels[v])[v] = T(1);
    return out;
}

template <typename T>
struct ScalarWithGrad {
    T value;
    nn::Tensor<T> grad;
};

/// Weighted soft Dice loss over one patch:
///   1 - (eps + 2 sum_c w_c sum_v s*y) / (eps + sum_c w_c sum_v (s + y))
/// Gradient is with respect to the predicted probabilities s.
template <typename T>
ScalarWithGrad<T> weighted_dice_loss(const nn::Tensor<T>& probs, const nn::Tensor<T>& onehot,
                                     const std::vector<T>& weights, T epsilon) {
    if (!probs.same_grid(onehot))
        throw ValidationError("dice: prediction and target grids differ");
    if (static_cast<int>(weights.size()) != probs.ch)
        throw ValidationError("dice: expected " + std::to_string(probs.ch) + " class weights, got " +
                              std::to_string(weights.size()));
    const std::size_t n = probs.spatial();
    T num = epsilon, den = epsilon;
    for (int c = 0; c < probs.ch; ++c) {
        const T* s = probs.plane(c);
        const T* y = onehot.plane(c);
        T inter = T(0), mass = T(0);
        for (std::size_t v = 0; v < n; ++v) {
            inter += s[v] * y[v];
            mass += s[v] + y[v];
        }
        num += T(2) * weights[static_cast<std::size_t>(c)] * inter;
        den += weights[static_cast<std::size_t>(c)] * mass;
    }
    if (den <= T(0)) throw ValidationError("dice: denominator is zero; pass a positive epsilon");
    ScalarWithGrad<T> out;
    out.value = T(1) - num / den;
    out.grad = nn::Tensor<T>(probs.ch, probs.nx, probs.ny, probs.nz);
    const T den2 = den * den;
    for (int c = 0; c < probs.ch; ++c) {
        const T w = weights[static_cast<std::size_t>(c)];
        const T* y = onehot.plane(c);
        T* g = out.grad.plane(c);
        for (std::size_t v = 0; v < n; ++v)
            g[v] = w * (num - T(2) * y[v] * den) / den2;
    }
    return out;
}

template <typename T>
struct ProbVecWithGrad {
    T value;
    std::vector<T> grad;
};

/// Negative log-likelihood of the true domain label z (1-based) under the
/// discriminator's K+1 class distribution.
template <typename T>
ProbVecWithGrad<T> dis_loss_real(const std::vector<T>& probs, int z) {
    if (z < 1 || static_cast<std::size_t>(z) >= probs.size())
        throw ValidationError("dis_loss_real: domain label " + std::to_string(z) +
                              " outside 1.." + std::to_string(probs.size() - 1));
    const std::size_t i = static_cast<std::size_t>(z - 1);
    const T p = probs[i];
    ProbVecWithGrad<T> out;
    out.grad.assign(probs.size(), T(0));
    if (p > static_cast<T>(kProbFloor)) {
        out.value = -std::log(p);
        out.grad[i] = -T(1) / p;
    } else {
        out.value = -std::log(static_cast<T>(kProbFloor));
    }
    return out;
}

/// Loss assigning a generated patch to the synthetic class:
///   -log(1 - p(Z <= K)), i.e. -log of the K+1-th class mass.
template <typename T>
ProbVecWithGrad<T> dis_loss_fake(const std::vector<T>& probs) {
    if (probs.size() < 2) throw ValidationError("dis_loss_fake: needs at least two classes");
    T real_mass = T(0);
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) real_mass += probs[i];
    const T q = T(1) - real_mass;
    ProbVecWithGrad<T> out;
    out.grad.assign(probs.size(), T(0));
    if (q > static_cast<T>(kProbFloor)) {
        out.value = -std::log(q);
        for (std::size_t i = 0; i + 1 < probs.size(); ++i) out.grad[i] = T(1) / q;
    } else {
        out.value = -std::log(static_cast<T>(kProbFloor));
    }
    return out;
}

/// Batch objective minimized by the generator and segmenter:
///   sum_i dice_i - lambda * sum_i fake_i
/// where fake_i is dis_loss_fake on D(G(x_i)).
template <typename T>
T objective_gs(const std::vector<T>& dice_losses, const std::vector<T>& fake_losses, T lambda) {
    T d = T(0), f = T(0);
    for (T v : dice_losses) d += v;
    for (T v : fake_losses) f += v;
    return d - lambda * f;
}

/// Batch objective minimized by the discriminator:
///   sum_i (real_i + fake_i).
template <typename T>
T objective_d(const std::vector<T>& real_losses, const std::vector<T>& fake_losses) {
    T s = T(0);
    for (T v : real_losses) s += v;
    for (T v : fake_losses) s += v;
    return s;
}

/// Inverse class-voxel-frequency weights over the given masks, normalized to
/// sum to one. Classes absent from every mask get weight zero.
template <typename T>
std::vector<T> inverse_frequency_weights(const std::vector<const SegmentationMask*>& masks,
                                         int num_classes) {
    if (masks.empty()) throw ValidationError("class weights: no masks given");
    std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
    for (const SegmentationMask* m : masks)
        for (std::uint8_t l : m->labels) counts[l] += 1.0;
    std::vector<double> w(counts.size(), 0.0);
    double total = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] > 0.0) w[c] = 1.0 / counts[c];
        total += w[c];
    }
    if (total <= 0.0) throw ValidationError("class weights: all classes empty");
    std::vector<T> out(w.size());
    for (std::size_t c = 0; c < w.size(); ++c) out[c] = static_cast<T>(w[c] / total);
    return out;
}

/// Resolves the configured weighting scheme to a concrete per-class vector.
template <typename T>
std::vector<T> resolve_class_weights(const LossConfig& cfg,
                                     const std::vector<const SegmentationMask*>& train_masks,
                                     int num_classes) {
    if (!cfg.explicit_weights.empty()) {
        if (static_cast<int>(cfg.explicit_weights.size()) != num_classes)
            throw ValidationError("loss: explicit_weights has " +
                                  std::to_string(cfg.explicit_weights.size()) + " entries, need " +
                                  std::to_string(num_classes));
        std::vector<T> w(cfg.explicit_weights.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(cfg.explicit_weights[i]);
        return w;
    }
    if (cfg.class_weights == "uniform")
        return std::vector<T>(static_cast<std::size_t>(num_classes),
                              T(1) / static_cast<T>(num_classes));
    return inverse_frequency_weights<T>(train_masks, num_classes);
}

} // namespace advnorm
