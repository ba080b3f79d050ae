#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "advnorm/errors.hpp"
#include "advnorm/rng.hpp"

namespace advnorm::nn {

/// Dense multi-channel 3-D grid, channel-major, x fastest within a channel.
template <typename T>
struct Tensor {
    int ch = 0, nx = 0, ny = 0, nz = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int c, int x, int y, int z)
        : ch(c), nx(x), ny(y), nz(z),
          v(static_cast<std::size_t>(c) * x * y * z, T(0)) {}

    std::size_t spatial() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
    std::size_t size() const { return v.size(); }
    T* plane(int c) { return v.data() + static_cast<std::size_t>(c) * spatial(); }
    const T* plane(int c) const { return v.data() + static_cast<std::size_t>(c) * spatial(); }
    std::size_t at(int c, int x, int y, int z) const {
        return (static_cast<std::size_t>(c) * nz + z) * ny * nx +
               static_cast<std::size_t>(y) * nx + x;
    }
    bool same_grid(const Tensor& o) const {
        return ch == o.ch && nx == o.nx && ny == o.ny && nz == o.nz;
    }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }
};

enum class Activation { Linear, ReLU, LeakyReLU };

inline Activation activation_from_name(const std::string& s) {
    if (s == "linear") return Activation::Linear;
    if (s == "relu") return Activation::ReLU;
    if (s == "leaky_relu") return Activation::LeakyReLU;
    throw ValidationError("unknown activation '" + s + "'");
}

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Linear: return "linear";
        case Activation::ReLU: return "relu";
        default: return "leaky_relu";
    }
}

/// Visitor target for one named parameter tensor and its gradient buffer.
/// `decay` marks convolution kernels; biases and normalization affine terms
/// are never weight-decayed.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<int> shape;
    std::vector<T>* value;
    std::vector<T>* grad;
    bool decay;
};

/// 3-D convolution with He-initialized kernels. Caches its last input, so a
/// backward call must follow the forward call it refers to.
template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::string name, int in_ch, int out_ch, int ksize, int stride, int pad)
        : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride),
          pad_(pad) {
        w_.assign(static_cast<std::size_t>(out_ch_) * in_ch_ * k_ * k_ * k_, T(0));
        b_.assign(static_cast<std::size_t>(out_ch_), T(0));
        gw_.assign(w_.size(), T(0));
        gb_.assign(b_.size(), T(0));
    }

    void init_kaiming(Rng& rng) {
        double fan_in = static_cast<double>(in_ch_) * k_ * k_ * k_;
        double std = std::sqrt(2.0 / fan_in);
        for (auto& x : w_) x = static_cast<T>(std * rng.normal());
        for (auto& x : b_) x = T(0);
    }

    int out_extent(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.ch != in_ch_)
            throw ValidationError(name_ + ": expected " + std::to_string(in_ch_) +
                                  " input channels, got " + std::to_string(x.ch));
        x_cache_ = x;
        Tensor<T> out(out_ch_, out_extent(x.nx), out_extent(x.ny), out_extent(x.nz));
        for (int oc = 0; oc < out_ch_; ++oc) {
            T* op = out.plane(oc);
            std::fill(op, op + out.spatial(), b_[static_cast<std::size_t>(oc)]);
        }
        if (k_ == 3 && stride_ == 1 && pad_ == 1 && x.nx >= 2 && x.ny >= 2 && x.nz >= 2)
            forward_s1p1(x, out);
        else
            forward_generic(x, out);
        return out;
    }

    /// Returns the gradient with respect to the input; accumulates parameter
    /// gradients unless the layer is frozen for this step.
    Tensor<T> backward(const Tensor<T>& gout, bool accumulate_param_grads = true) {
        const Tensor<T>& x = x_cache_;
        Tensor<T> gin(x.ch, x.nx, x.ny, x.nz);
        if (accumulate_param_grads) {
            for (int oc = 0; oc < out_ch_; ++oc) {
                const T* gp = gout.plane(oc);
                T acc = T(0);
                for (std::size_t i = 0; i < gout.spatial(); ++i) acc += gp[i];
                gb_[static_cast<std::size_t>(oc)] += acc;
            }
        }
        if (k_ == 3 && stride_ == 1 && pad_ == 1 && x.nx >= 2 && x.ny >= 2 && x.nz >= 2)
            backward_s1p1(x, gout, gin, accumulate_param_grads);
        else
            backward_generic(x, gout, gin, accumulate_param_grads);
        return gin;
    }

    void zero_grads() {
        std::fill(gw_.begin(), gw_.end(), T(0));
        std::fill(gb_.begin(), gb_.end(), T(0));
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fn(ParamRef<T>{name_ + ".w", {out_ch_, in_ch_, k_, k_, k_}, &w_, &gw_, true});
        fn(ParamRef<T>{name_ + ".b", {out_ch_}, &b_, &gb_, false});
    }

    std::vector<T>& weights() { return w_; }
    std::vector<T>& bias() { return b_; }
    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

private:
    std::size_t widx(int oc, int ic, int kz, int ky, int kx) const {
        return ((((static_cast<std::size_t>(oc) * in_ch_ + ic) * k_) + kz) * k_ + ky) * k_ + kx;
    }

    // k=3 / stride 1 / pad 1: accumulate weight * shifted-plane products over
    // the overlap region; x-contiguous inner loops vectorize well.
    void forward_s1p1(const Tensor<T>& x, Tensor<T>& out) {
        const int nx = x.nx, ny = x.ny, nz = x.nz;
        for (int oc = 0; oc < out_ch_; ++oc) {
            T* op = out.plane(oc);
            for (int ic = 0; ic < in_ch_; ++ic) {
                const T* ip = x.plane(ic);
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const T w = w_[widx(oc, ic, kz, ky, kx)];
                            if (w == T(0)) continue;
                            const int sx = kx - 1, sy = ky - 1, sz = kz - 1;
                            const int x0 = sx < 0 ? 1 : 0, x1 = nx - (sx > 0 ? 1 : 0);
                            const int y0 = sy < 0 ? 1 : 0, y1 = ny - (sy > 0 ? 1 : 0);
                            const int z0 = sz < 0 ? 1 : 0, z1 = nz - (sz > 0 ? 1 : 0);
                            for (int z = z0; z < z1; ++z)
                                for (int y = y0; y < y1; ++y) {
                                    T* orow = op + (static_cast<std::ptrdiff_t>(z) * ny + y) * nx;
                                    const T* irow =
                                        ip + ((static_cast<std::ptrdiff_t>(z) + sz) * ny + (y + sy)) * nx;
                                    for (int xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx + sx];
                                }
                        }
            }
        }
    }

    void forward_generic(const Tensor<T>& x, Tensor<T>& out) {
        for (int oc = 0; oc < out_ch_; ++oc) {
            T* op = out.plane(oc);
            for (int ic = 0; ic < in_ch_; ++ic) {
                const T* ip = x.plane(ic);
                std::size_t o = 0;
                for (int z = 0; z < out.nz; ++z)
                    for (int y = 0; y < out.ny; ++y)
                        for (int xx = 0; xx < out.nx; ++xx, ++o) {
                            T acc = T(0);
                            for (int kz = 0; kz < k_; ++kz) {
                                int iz = z * stride_ + kz - pad_;
                                if (iz < 0 || iz >= x.nz) continue;
                                for (int ky = 0; ky < k_; ++ky) {
                                    int iy = y * stride_ + ky - pad_;
                                    if (iy < 0 || iy >= x.ny) continue;
                                    for (int kx = 0; kx < k_; ++kx) {
                                        int ix = xx * stride_ + kx - pad_;
                                        if (ix < 0 || ix >= x.nx) continue;
                                        acc += w_[widx(oc, ic, kz, ky, kx)] *
                                               ip[(static_cast<std::size_t>(iz) * x.ny + iy) * x.nx + ix];
                                    }
                                }
                            }
                            op[o] += acc;
                        }
            }
        }
    }

    void backward_s1p1(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gin,
                       bool accumulate_param_grads) {
        const int nx = x.nx, ny = x.ny, nz = x.nz;
        for (int oc = 0; oc < out_ch_; ++oc) {
            const T* gp = gout.plane(oc);
            for (int ic = 0; ic < in_ch_; ++ic) {
                const T* ip = x.plane(ic);
                T* gip = gin.plane(ic);
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sx = kx - 1, sy = ky - 1, sz = kz - 1;
                            const int x0 = sx < 0 ? 1 : 0, x1 = nx - (sx > 0 ? 1 : 0);
                            const int y0 = sy < 0 ? 1 : 0, y1 = ny - (sy > 0 ? 1 : 0);
                            const int z0 = sz < 0 ? 1 : 0, z1 = nz - (sz > 0 ? 1 : 0);
                            const T w = w_[widx(oc, ic, kz, ky, kx)];
                            T gw_acc = T(0);
                            for (int z = z0; z < z1; ++z)
                                for (int y = y0; y < y1; ++y) {
                                    const T* grow = gp + (static_cast<std::ptrdiff_t>(z) * ny + y) * nx;
                                    const std::ptrdiff_t ioff =
                                        ((static_cast<std::ptrdiff_t>(z) + sz) * ny + (y + sy)) * nx;
                                    const T* irow = ip + ioff;
                                    T* girow = gip + ioff;
                                    for (int xx = x0; xx < x1; ++xx) {
                                        gw_acc += grow[xx] * irow[xx + sx];
                                        girow[xx + sx] += w * grow[xx];
                                    }
                                }
                            if (accumulate_param_grads) gw_[widx(oc, ic, kz, ky, kx)] += gw_acc;
                        }
            }
        }
    }

    void backward_generic(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gin,
                          bool accumulate_param_grads) {
        for (int oc = 0; oc < out_ch_; ++oc) {
            const T* gp = gout.plane(oc);
            for (int ic = 0; ic < in_ch_; ++ic) {
                const T* ip = x.plane(ic);
                T* gip = gin.plane(ic);
                std::size_t o = 0;
                for (int z = 0; z < gout.nz; ++z)
                    for (int y = 0; y < gout.ny; ++y)
                        for (int xx = 0; xx < gout.nx; ++xx, ++o) {
                            const T g = gp[o];
                            if (g == T(0)) continue;
                            for (int kz = 0; kz < k_; ++kz) {
                                int iz = z * stride_ + kz - pad_;
                                if (iz < 0 || iz >= x.nz) continue;
                                for (int ky = 0; ky < k_; ++ky) {
                                    int iy = y * stride_ + ky - pad_;
                                    if (iy < 0 || iy >= x.ny) continue;
                                    for (int kx = 0; kx < k_; ++kx) {
                                        int ix = xx * stride_ + kx - pad_;
                                        if (ix < 0 || ix >= x.nx) continue;
                                        std::size_t ii =
                                            (static_cast<std::size_t>(iz) * x.ny + iy) * x.nx + ix;
                                        if (accumulate_param_grads)
                                            gw_[widx(oc, ic, kz, ky, kx)] += g * ip[ii];
                                        gip[ii] += g * w_[widx(oc, ic, kz, ky, kx)];
                                    }
                                }
                            }
                        }
            }
        }
    }

    std::string name_;
    int in_ch_ = 0, out_ch_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
    std::vector<T> w_, b_, gw_, gb_;
    Tensor<T> x_cache_;
};

/// Elementwise activation; caches pre-activation values.
template <typename T>
class Act {
public:
    Act() = default;
    Act(Activation kind, T slope = T(0.01)) : kind_(kind), slope_(slope) {}

    Tensor<T> forward(const Tensor<T>& x) {
        x_cache_ = x;
        if (kind_ == Activation::Linear) return x;
        Tensor<T> out = x;
        if (kind_ == Activation::ReLU) {
            for (auto& v : out.v) v = v > T(0) ? v : T(0);
        } else {
            for (auto& v : out.v) v = v > T(0) ? v : slope_ * v;
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gout) {
        if (kind_ == Activation::Linear) return gout;
        Tensor<T> gin = gout;
        const T neg = kind_ == Activation::ReLU ? T(0) : slope_;
        for (std::size_t i = 0; i < gin.v.size(); ++i)
            if (x_cache_.v[i] <= T(0)) gin.v[i] *= neg;
        return gin;
    }

private:
    Activation kind_ = Activation::ReLU;
    T slope_ = T(0.01);
    Tensor<T> x_cache_;
};

/// Per-channel normalization over the spatial grid with learned affine terms.
template <typename T>
class InstanceNorm3d {
public:
    InstanceNorm3d() = default;
    InstanceNorm3d(std::string name, int channels)
        : name_(std::move(name)), gamma_(static_cast<std::size_t>(channels), T(1)),
          beta_(static_cast<std::size_t>(channels), T(0)), ggamma_(gamma_.size(), T(0)),
          gbeta_(beta_.size(), T(0)) {}

    Tensor<T> forward(const Tensor<T>& x) {
        const std::size_t n = x.spatial();
        xhat_ = Tensor<T>(x.ch, x.nx, x.ny, x.nz);
        inv_std_.assign(static_cast<std::size_t>(x.ch), T(0));
        Tensor<T> out(x.ch, x.nx, x.ny, x.nz);
        for (int c = 0; c < x.ch; ++c) {
            const T* ip = x.plane(c);
            T mean = T(0);
            for (std::size_t i = 0; i < n; ++i) mean += ip[i];
            mean /= static_cast<T>(n);
            T var = T(0);
            for (std::size_t i = 0; i < n; ++i) var += (ip[i] - mean) * (ip[i] - mean);
            var /= static_cast<T>(n);
            T inv = T(1) / std::sqrt(var + T(1e-5));
            inv_std_[static_cast<std::size_t>(c)] = inv;
            T* xh = xhat_.plane(c);
            T* op = out.plane(c);
            const T g = gamma_[static_cast<std::size_t>(c)], b = beta_[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < n; ++i) {
                xh[i] = (ip[i] - mean) * inv;
                op[i] = g * xh[i] + b;
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gout, bool accumulate_param_grads = true) {
        const std::size_t n = gout.spatial();
        Tensor<T> gin(gout.ch, gout.nx, gout.ny, gout.nz);
        for (int c = 0; c < gout.ch; ++c) {
            const T* gp = gout.plane(c);
            const T* xh = xhat_.plane(c);
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * xh[i];
            }
            if (accumulate_param_grads) {
                ggamma_[static_cast<std::size_t>(c)] += sum_gx;
                gbeta_[static_cast<std::size_t>(c)] += sum_g;
            }
            const T g = gamma_[static_cast<std::size_t>(c)];
            const T inv = inv_std_[static_cast<std::size_t>(c)];
            const T mg = sum_g / static_cast<T>(n);
            const T mgx = sum_gx / static_cast<T>(n);
            T* gi = gin.plane(c);
            for (std::size_t i = 0; i < n; ++i)
                gi[i] = g * inv * (gp[i] - mg - xh[i] * mgx);
        }
        return gin;
    }

    void zero_grads() {
        std::fill(ggamma_.begin(), ggamma_.end(), T(0));
        std::fill(gbeta_.begin(), gbeta_.end(), T(0));
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        int c = static_cast<int>(gamma_.size());
        fn(ParamRef<T>{name_ + ".gamma", {c}, &gamma_, &ggamma_, false});
        fn(ParamRef<T>{name_ + ".beta", {c}, &beta_, &gbeta_, false});
    }

private:
    std::string name_;
    std::vector<T> gamma_, beta_, ggamma_, gbeta_;
    std::vector<T> inv_std_;
    Tensor<T> xhat_;
};

/// Nearest-neighbor spatial upsampling by 2 in every axis.
template <typename T>
struct Upsample2x {
    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> out(x.ch, 2 * x.nx, 2 * x.ny, 2 * x.nz);
        for (int c = 0; c < x.ch; ++c) {
            const T* ip = x.plane(c);
            T* op = out.plane(c);
            std::size_t o = 0;
            for (int z = 0; z < out.nz; ++z)
                for (int y = 0; y < out.ny; ++y)
                    for (int xx = 0; xx < out.nx; ++xx, ++o)
                        op[o] = ip[(static_cast<std::size_t>(z / 2) * x.ny + y / 2) * x.nx + xx / 2];
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gout) {
        Tensor<T> gin(gout.ch, gout.nx / 2, gout.ny / 2, gout.nz / 2);
        for (int c = 0; c < gout.ch; ++c) {
            const T* gp = gout.plane(c);
            T* gi = gin.plane(c);
            std::size_t o = 0;
            for (int z = 0; z < gout.nz; ++z)
                for (int y = 0; y < gout.ny; ++y)
                    for (int xx = 0; xx < gout.nx; ++xx, ++o)
                        gi[(static_cast<std::size_t>(z / 2) * gin.ny + y / 2) * gin.nx + xx / 2] +=
                            gp[o];
        }
        return gin;
    }
};

/// Softmax over the channel axis, independently per voxel.
template <typename T>
class ChannelSoftmax {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = Tensor<T>(x.ch, x.nx, x.ny, x.nz);
        const std::size_t n = x.spatial();
        for (std::size_t i = 0; i < n; ++i) {
            T mx = x.v[i];
            for (int c = 1; c < x.ch; ++c) mx = std::max(mx, x.plane(c)[i]);
            T sum = T(0);
            for (int c = 0; c < x.ch; ++c) {
                T e = std::exp(x.plane(c)[i] - mx);
                y_.plane(c)[i] = e;
                sum += e;
            }
            for (int c = 0; c < x.ch; ++c) y_.plane(c)[i] /= sum;
        }
        return y_;
    }

    /// gout is d(loss)/d(probabilities); returns d(loss)/d(logits).
    Tensor<T> backward(const Tensor<T>& gout) {
        Tensor<T> gin(gout.ch, gout.nx, gout.ny, gout.nz);
        const std::size_t n = gout.spatial();
        for (std::size_t i = 0; i < n; ++i) {
            T dot = T(0);
            for (int c = 0; c < gout.ch; ++c) dot += gout.plane(c)[i] * y_.plane(c)[i];
            for (int c = 0; c < gout.ch; ++c)
                gin.plane(c)[i] = y_.plane(c)[i] * (gout.plane(c)[i] - dot);
        }
        return gin;
    }

    const Tensor<T>& probs() const { return y_; }

private:
    Tensor<T> y_;
};

/// Fully connected map used as the discriminator head.
template <typename T>
class Dense {
public:
    Dense() = default;
    Dense(std::string name, int in_features, int out_features)
        : name_(std::move(name)), in_(in_features), out_(out_features),
          w_(static_cast<std::size_t>(in_features) * out_features, T(0)),
          b_(static_cast<std::size_t>(out_features), T(0)), gw_(w_.size(), T(0)),
          gb_(b_.size(), T(0)) {}

    void init_kaiming(Rng& rng) {
        double std = std::sqrt(2.0 / static_cast<double>(in_));
        for (auto& x : w_) x = static_cast<T>(std * rng.normal());
        for (auto& x : b_) x = T(0);
    }

    std::vector<T> forward(const std::vector<T>& x) {
        x_cache_ = x;
        std::vector<T> y(static_cast<std::size_t>(out_));
        for (int o = 0; o < out_; ++o) {
            T acc = b_[static_cast<std::size_t>(o)];
            const T* wrow = w_.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) acc += wrow[i] * x[static_cast<std::size_t>(i)];
            y[static_cast<std::size_t>(o)] = acc;
        }
        return y;
    }

    std::vector<T> backward(const std::vector<T>& gout, bool accumulate_param_grads = true) {
        std::vector<T> gin(static_cast<std::size_t>(in_), T(0));
        for (int o = 0; o < out_; ++o) {
            const T g = gout[static_cast<std::size_t>(o)];
            const T* wrow = w_.data() + static_cast<std::size_t>(o) * in_;
            T* gwrow = gw_.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) {
                if (accumulate_param_grads) gwrow[i] += g * x_cache_[static_cast<std::size_t>(i)];
                gin[static_cast<std::size_t>(i)] += g * wrow[i];
            }
            if (accumulate_param_grads) gb_[static_cast<std::size_t>(o)] += g;
        }
        return gin;
    }

    void zero_grads() {
        std::fill(gw_.begin(), gw_.end(), T(0));
        std::fill(gb_.begin(), gb_.end(), T(0));
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fn(ParamRef<T>{name_ + ".w", {out_, in_}, &w_, &gw_, true});
        fn(ParamRef<T>{name_ + ".b", {out_}, &b_, &gb_, false});
    }

private:
    std::string name_;
    int in_ = 0, out_ = 0;
    std::vector<T> w_, b_, gw_, gb_;
    std::vector<T> x_cache_;
};

} // namespace advnorm::nn
