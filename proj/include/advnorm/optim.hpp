#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/nn.hpp"

namespace advnorm {

template <typename T, typename Net>
std::vector<nn::ParamRef<T>> collect_params(Net& net) {
    std::vector<nn::ParamRef<T>> out;
    net.visit_params([&](const nn::ParamRef<T>& p) { out.push_back(p); });
    return out;
}

/// SGD with classical momentum and decoupled weight decay. Decay is applied
/// only to parameters flagged for it (convolution and dense kernels), never
/// to biases or normalization terms:
///   m <- momentum * m + g
///   w <- w - lr * m - lr * weight_decay * w
/// Holds pointers into the owning network, which must stay at a fixed
/// address for the optimizer's lifetime.
template <typename T>
class Sgd {
public:
    Sgd() = default;
    // lr 0 is legal and makes step() a pure no-op on the parameters; configs
    // still require positive rates, the degenerate case exists for testing
    // and for freezing a network mid-run.
    Sgd(std::vector<nn::ParamRef<T>> params, double lr, double momentum, double weight_decay)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
        if (!(lr_ >= 0.0)) throw ValidationError("sgd: learning rate must be >= 0");
        if (!(momentum_ >= 0.0 && momentum_ < 1.0))
            throw ValidationError("sgd: momentum must be in [0,1)");
        if (!(wd_ >= 0.0)) throw ValidationError("sgd: weight_decay must be >= 0");
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.value->size(), T(0));
    }

    void step() {
        const T lr = static_cast<T>(lr_);
        const T mu = static_cast<T>(momentum_);
        const T wd = static_cast<T>(wd_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& m = velocity_[i];
            T* w = p.value->data();
            const T* g = p.grad->data();
            const std::size_t n = p.value->size();
            if (p.decay && wd > T(0)) {
                for (std::size_t k = 0; k < n; ++k) {
                    m[k] = mu * m[k] + g[k];
                    w[k] -= lr * m[k] + lr * wd * w[k];
                }
            } else {
                for (std::size_t k = 0; k < n; ++k) {
                    m[k] = mu * m[k] + g[k];
                    w[k] -= lr * m[k];
                }
            }
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) {
        if (!(lr >= 0.0)) throw ValidationError("sgd: learning rate must be >= 0");
        lr_ = lr;
    }

    /// Momentum buffers in parameter visit order, for checkpointing.
    template <typename Fn>
    void visit_velocity(Fn&& fn) {
        for (std::size_t i = 0; i < params_.size(); ++i)
            fn(params_[i].name, params_[i].shape, velocity_[i]);
    }

    std::size_t num_params() const { return params_.size(); }

private:
    std::vector<nn::ParamRef<T>> params_;
    std::vector<std::vector<T>> velocity_;
    double lr_ = 1e-4, momentum_ = 0.9, wd_ = 0.0;
};

/// Cuts the learning rate by `factor` once a monitored loss has failed to
/// improve for `patience` consecutive observations. The counter resets after
/// each cut.
class PlateauScheduler {
public:
    PlateauScheduler() = default;
    PlateauScheduler(int patience, double factor) : patience_(patience), factor_(factor) {
        if (patience_ < 1) throw ValidationError("scheduler: patience must be >= 1");
        if (!(factor_ > 1.0)) throw ValidationError("scheduler: factor must be > 1");
    }

    /// Feed one loss observation; returns true when the lr should be cut now.
    bool observe(double loss) {
        if (loss < best_) {
            best_ = loss;
            bad_ = 0;
            return false;
        }
        if (++bad_ >= patience_) {
            bad_ = 0;
            ++cuts_;
            return true;
        }
        return false;
    }

    double factor() const { return factor_; }
    int cuts() const { return cuts_; }
    double best() const { return best_; }
    int bad_epochs() const { return bad_; }

    nlohmann::ordered_json state() const {
        return nlohmann::ordered_json{{"patience", patience_},
                                      {"factor", factor_},
                                      {"best", std::isinf(best_) ? nlohmann::ordered_json(nullptr)
                                                                 : nlohmann::ordered_json(best_)},
                                      {"bad", bad_},
                                      {"cuts", cuts_}};
    }

    static PlateauScheduler from_state(const nlohmann::ordered_json& j) {
        PlateauScheduler s(j.at("patience").get<int>(), j.at("factor").get<double>());
        if (!j.at("best").is_null()) s.best_ = j.at("best").get<double>();
        s.bad_ = j.at("bad").get<int>();
        s.cuts_ = j.at("cuts").get<int>();
        return s;
    }

private:
    int patience_ = 3;
    double factor_ = 10.0;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_ = 0;
    int cuts_ = 0;
};

} // namespace advnorm
