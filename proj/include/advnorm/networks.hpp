#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/nn.hpp"
#include "advnorm/rng.hpp"

namespace advnorm {

struct UNetConfig {
    int in_channels = 1;
    int out_channels = 1;
    int depth = 2;
    int base_channels = 8;
    std::string hidden_activation = "relu";
    bool instance_norm = false;
    // Adds the input to the head output; only meaningful when in == out
    // channels. The generator defaults to true so it starts near identity,
    // the segmenter ignores it.
    bool identity_skip = true;

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw ValidationError("unet: channel counts must be positive");
        if (depth < 1 || depth > 6) throw ValidationError("unet: depth must be in [1,6]");
        if (base_channels < 1) throw ValidationError("unet: base_channels must be positive");
        if (identity_skip && in_channels != out_channels)
            throw ValidationError("unet: identity_skip requires matching channel counts");
        nn::activation_from_name(hidden_activation);
    }
};

inline void to_json(nlohmann::ordered_json& j, const UNetConfig& c) {
    j = nlohmann::ordered_json{{"in_channels", c.in_channels},
                               {"out_channels", c.out_channels},
                               {"depth", c.depth},
                               {"base_channels", c.base_channels},
                               {"hidden_activation", c.hidden_activation},
                               {"instance_norm", c.instance_norm},
                               {"identity_skip", c.identity_skip}};
}

// Overlays only the fields present, so role defaults (say, the segmenter's
// normalization) survive partial blocks in hand-written configs.
inline void from_json(const nlohmann::ordered_json& j, UNetConfig& c) {
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
    if (j.contains("out_channels")) j.at("out_channels").get_to(c.out_channels);
    if (j.contains("depth")) j.at("depth").get_to(c.depth);
    if (j.contains("base_channels")) j.at("base_channels").get_to(c.base_channels);
    if (j.contains("hidden_activation")) j.at("hidden_activation").get_to(c.hidden_activation);
    if (j.contains("instance_norm")) j.at("instance_norm").get_to(c.instance_norm);
    if (j.contains("identity_skip")) j.at("identity_skip").get_to(c.identity_skip);
}

struct DiscriminatorConfig {
    int in_channels = 1;
    std::vector<int> channels = {8, 16, 32};
    double leaky_slope = 0.2;
    int num_outputs = 3; // K real domains plus one synthetic class

    void validate() const {
        if (in_channels < 1) throw ValidationError("discriminator: in_channels must be positive");
        if (channels.empty()) throw ValidationError("discriminator: needs at least one conv stage");
        for (int c : channels)
            if (c < 1) throw ValidationError("discriminator: channel counts must be positive");
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
            throw ValidationError("discriminator: leaky_slope must be in (0,1)");
        if (num_outputs < 2) throw ValidationError("discriminator: needs at least two classes");
    }
};

inline void to_json(nlohmann::ordered_json& j, const DiscriminatorConfig& c) {
    j = nlohmann::ordered_json{{"in_channels", c.in_channels},
                               {"channels", c.channels},
                               {"leaky_slope", c.leaky_slope},
                               {"num_outputs", c.num_outputs}};
}

inline void from_json(const nlohmann::ordered_json& j, DiscriminatorConfig& c) {
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
    if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<int>>();
    if (j.contains("leaky_slope")) j.at("leaky_slope").get_to(c.leaky_slope);
    if (j.contains("num_outputs")) j.at("num_outputs").get_to(c.num_outputs);
}

/// Encoder-decoder with skip connections. Serves as both the generator
/// (out_channels == in_channels, linear head, optional identity skip) and the
/// segmenter (out_channels == class count, caller applies ChannelSoftmax).
template <typename T>
class UNet3d {
public:
    UNet3d() = default;

    explicit UNet3d(const UNetConfig& cfg, std::string prefix = "unet") : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.depth;
        auto ch = [&](int level) { return cfg_.base_channels << level; };
        nn::Activation act = nn::activation_from_name(cfg_.hidden_activation);
        for (int l = 0; l < d; ++l) {
            std::string tag = prefix + ".enc" + std::to_string(l);
            int in = l == 0 ? cfg_.in_channels : ch(l);
            enc_a_.emplace_back(tag + "a", in, ch(l), 3, 1, 1);
            enc_b_.emplace_back(tag + "b", ch(l), ch(l), 3, 1, 1);
            if (cfg_.instance_norm) {
                norm_a_.emplace_back(tag + "a.norm", ch(l));
                norm_b_.emplace_back(tag + "b.norm", ch(l));
            }
            act_a_.emplace_back(act);
            act_b_.emplace_back(act);
            if (l + 1 < d)
                down_.emplace_back(prefix + ".down" + std::to_string(l), ch(l), ch(l + 1), 3, 2, 1);
        }
        for (int l = d - 2; l >= 0; --l) {
            std::string tag = prefix + ".dec" + std::to_string(l);
            up_conv_.emplace_back(tag + ".up", ch(l + 1), ch(l), 3, 1, 1);
            dec_conv_.emplace_back(tag + ".mix", 2 * ch(l), ch(l), 3, 1, 1);
            if (cfg_.instance_norm) {
                norm_up_.emplace_back(tag + ".up.norm", ch(l));
                norm_dec_.emplace_back(tag + ".mix.norm", ch(l));
            }
            act_up_.emplace_back(act);
            act_dec_.emplace_back(act);
        }
        up_.resize(up_conv_.size());
        head_ = nn::Conv3d<T>(prefix + ".head", ch(0), cfg_.out_channels, 1, 1, 0);
    }

    const UNetConfig& config() const { return cfg_; }

    void init_params(Rng& rng) {
        for (auto& c : enc_a_) c.init_kaiming(rng);
        for (auto& c : enc_b_) c.init_kaiming(rng);
        for (auto& c : down_) c.init_kaiming(rng);
        for (auto& c : up_conv_) c.init_kaiming(rng);
        for (auto& c : dec_conv_) c.init_kaiming(rng);
        head_.init_kaiming(rng);
    }

    nn::Tensor<T> forward(const nn::Tensor<T>& x) {
        check_divisible(x);
        skips_.clear();
        nn::Tensor<T> h = x;
        const int d = cfg_.depth;
        for (int l = 0; l < d; ++l) {
            h = act_a_[l].forward(maybe_norm(norm_a_, l, enc_a_[static_cast<std::size_t>(l)].forward(h)));
            h = act_b_[l].forward(maybe_norm(norm_b_, l, enc_b_[static_cast<std::size_t>(l)].forward(h)));
            if (l + 1 < d) {
                skips_.push_back(h);
                h = down_[static_cast<std::size_t>(l)].forward(h);
            }
        }
        for (std::size_t i = 0; i < up_conv_.size(); ++i) {
            h = up_[i].forward(h);
            h = act_up_[i].forward(maybe_norm(norm_up_, static_cast<int>(i), up_conv_[i].forward(h)));
            const nn::Tensor<T>& skip = skips_[skips_.size() - 1 - i];
            h = concat(skip, h);
            h = act_dec_[i].forward(maybe_norm(norm_dec_, static_cast<int>(i), dec_conv_[i].forward(h)));
        }
        nn::Tensor<T> out = head_.forward(h);
        if (cfg_.identity_skip)
            for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += x.v[i];
        return out;
    }

    /// Backpropagates d(loss)/d(output); returns d(loss)/d(input).
    nn::Tensor<T> backward(const nn::Tensor<T>& gout, bool accumulate_param_grads = true) {
        const bool acc = accumulate_param_grads;
        skip_grads_.assign(skips_.size(), nn::Tensor<T>{});
        nn::Tensor<T> g = head_.backward(gout, acc);
        for (std::size_t ri = up_conv_.size(); ri-- > 0;) {
            g = dec_conv_[ri].backward(maybe_norm_bwd(norm_dec_, static_cast<int>(ri),
                                                      act_dec_[ri].backward(g), acc),
                                       acc);
            auto [g_skip, g_up] = split(g, skips_[skips_.size() - 1 - ri].ch);
            skip_grads_[skips_.size() - 1 - ri] = g_skip;
            g = up_conv_[ri].backward(
                maybe_norm_bwd(norm_up_, static_cast<int>(ri), act_up_[ri].backward(g_up), acc), acc);
            g = up_[ri].backward(g);
        }
        const int d = cfg_.depth;
        for (int l = d - 1; l >= 0; --l) {
            if (l + 1 < d) {
                g = down_[static_cast<std::size_t>(l)].backward(g, acc);
                const nn::Tensor<T>& extra = skip_grads_[static_cast<std::size_t>(l)];
                for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += extra.v[i];
            }
            g = enc_b_[static_cast<std::size_t>(l)].backward(
                maybe_norm_bwd(norm_b_, l, act_b_[l].backward(g), acc), acc);
            g = enc_a_[static_cast<std::size_t>(l)].backward(
                maybe_norm_bwd(norm_a_, l, act_a_[l].backward(g), acc), acc);
        }
        if (cfg_.identity_skip)
            for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += gout.v[i];
        return g;
    }

    void zero_grads() {
        visit_params([](const nn::ParamRef<T>& p) {
            std::fill(p.grad->begin(), p.grad->end(), T(0));
        });
    }

    template <typename Fn>
    void visit_params(Fn&& fn) {
        for (auto& c : enc_a_) c.visit(fn);
        for (auto& n : norm_a_) n.visit(fn);
        for (auto& c : enc_b_) c.visit(fn);
        for (auto& n : norm_b_) n.visit(fn);
        for (auto& c : down_) c.visit(fn);
        for (auto& c : up_conv_) c.visit(fn);
        for (auto& n : norm_up_) n.visit(fn);
        for (auto& c : dec_conv_) c.visit(fn);
        for (auto& n : norm_dec_) n.visit(fn);
        head_.visit(fn);
    }

private:
    void check_divisible(const nn::Tensor<T>& x) const {
        int f = 1 << (cfg_.depth - 1);
        if (x.nx % f || x.ny % f || x.nz % f)
            throw ValidationError("unet: input extent (" + std::to_string(x.nx) + "," +
                                  std::to_string(x.ny) + "," + std::to_string(x.nz) +
                                  ") not divisible by " + std::to_string(f));
        if (x.ch != cfg_.in_channels)
            throw ValidationError("unet: expected " + std::to_string(cfg_.in_channels) +
                                  " channels, got " + std::to_string(x.ch));
    }

    nn::Tensor<T> maybe_norm(std::vector<nn::InstanceNorm3d<T>>& norms, int idx,
                             const nn::Tensor<T>& x) {
        if (!cfg_.instance_norm) return x;
        return norms[static_cast<std::size_t>(idx)].forward(x);
    }

    nn::Tensor<T> maybe_norm_bwd(std::vector<nn::InstanceNorm3d<T>>& norms, int idx,
                                 const nn::Tensor<T>& g, bool acc) {
        if (!cfg_.instance_norm) return g;
        return norms[static_cast<std::size_t>(idx)].backward(g, acc);
    }

    static nn::Tensor<T> concat(const nn::Tensor<T>& a, const nn::Tensor<T>& b) {
        nn::Tensor<T> out(a.ch + b.ch, a.nx, a.ny, a.nz);
        std::copy(a.v.begin(), a.v.end(), out.v.begin());
        std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
        return out;
    }

    static std::pair<nn::Tensor<T>, nn::Tensor<T>> split(const nn::Tensor<T>& g, int ch_a) {
        nn::Tensor<T> a(ch_a, g.nx, g.ny, g.nz);
        nn::Tensor<T> b(g.ch - ch_a, g.nx, g.ny, g.nz);
        std::copy(g.v.begin(), g.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), a.v.begin());
        std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), g.v.end(), b.v.begin());
        return {std::move(a), std::move(b)};
    }

    UNetConfig cfg_;
    std::vector<nn::Conv3d<T>> enc_a_, enc_b_, down_, up_conv_, dec_conv_;
    std::vector<nn::InstanceNorm3d<T>> norm_a_, norm_b_, norm_up_, norm_dec_;
    std::vector<nn::Act<T>> act_a_, act_b_, act_up_, act_dec_;
    std::vector<nn::Upsample2x<T>> up_;
    nn::Conv3d<T> head_;
    std::vector<nn::Tensor<T>> skips_;
    std::vector<nn::Tensor<T>> skip_grads_;
};

/// Strided conv stack, global average pool, dense head, softmax over the
/// K + 1 classes. forward() returns probabilities.
template <typename T>
class Discriminator {
public:
    Discriminator() = default;

    explicit Discriminator(const DiscriminatorConfig& cfg, std::string prefix = "disc")
        : cfg_(cfg) {
        cfg_.validate();
        int in = cfg_.in_channels;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            convs_.emplace_back(prefix + ".conv" + std::to_string(i), in, cfg_.channels[i], 3, 2, 1);
            acts_.emplace_back(nn::Activation::LeakyReLU, static_cast<T>(cfg_.leaky_slope));
            in = cfg_.channels[i];
        }
        dense_ = nn::Dense<T>(prefix + ".out", in, cfg_.num_outputs);
    }

    const DiscriminatorConfig& config() const { return cfg_; }

    void init_params(Rng& rng) {
        for (auto& c : convs_) c.init_kaiming(rng);
        dense_.init_kaiming(rng);
    }

    std::vector<T> forward(const nn::Tensor<T>& x) {
        nn::Tensor<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i)
            h = acts_[i].forward(convs_[i].forward(h));
        pooled_spatial_ = h.spatial();
        std::vector<T> pooled(static_cast<std::size_t>(h.ch));
        for (int c = 0; c < h.ch; ++c) {
            const T* p = h.plane(c);
            T acc = T(0);
            for (std::size_t i = 0; i < h.spatial(); ++i) acc += p[i];
            pooled[static_cast<std::size_t>(c)] = acc / static_cast<T>(h.spatial());
        }
        pooled_shape_ = {h.ch, h.nx, h.ny, h.nz};
        std::vector<T> logits = dense_.forward(pooled);
        probs_.assign(logits.size(), T(0));
        T mx = logits[0];
        for (T l : logits) mx = std::max(mx, l);
        T sum = T(0);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            probs_[i] = std::exp(logits[i] - mx);
            sum += probs_[i];
        }
        for (auto& p : probs_) p /= sum;
        return probs_;
    }

    /// gout is d(loss)/d(probabilities); returns d(loss)/d(input image).
    nn::Tensor<T> backward(const std::vector<T>& gout, bool accumulate_param_grads = true) {
        std::vector<T> glogits(gout.size());
        T dot = T(0);
        for (std::size_t i = 0; i < gout.size(); ++i) dot += gout[i] * probs_[i];
        for (std::size_t i = 0; i < gout.size(); ++i) glogits[i] = probs_[i] * (gout[i] - dot);
        std::vector<T> gpooled = dense_.backward(glogits, accumulate_param_grads);
        nn::Tensor<T> g(pooled_shape_[0], pooled_shape_[1], pooled_shape_[2], pooled_shape_[3]);
        for (int c = 0; c < g.ch; ++c) {
            T* p = g.plane(c);
            T val = gpooled[static_cast<std::size_t>(c)] / static_cast<T>(pooled_spatial_);
            std::fill(p, p + g.spatial(), val);
        }
        for (std::size_t i = convs_.size(); i-- > 0;)
            g = convs_[i].backward(acts_[i].backward(g), accumulate_param_grads);
        return g;
    }

    void zero_grads() {
        for (auto& c : convs_) c.zero_grads();
        dense_.zero_grads();
    }

    template <typename Fn>
    void visit_params(Fn&& fn) {
        for (auto& c : convs_) c.visit(fn);
        dense_.visit(fn);
    }

    const std::vector<T>& last_probs() const { return probs_; }

private:
    DiscriminatorConfig cfg_;
    std::vector<nn::Conv3d<T>> convs_;
    std::vector<nn::Act<T>> acts_;
    nn::Dense<T> dense_;
    std::vector<T> probs_;
    std::size_t pooled_spatial_ = 0;
    std::array<int, 4> pooled_shape_{};
};

} // namespace advnorm
