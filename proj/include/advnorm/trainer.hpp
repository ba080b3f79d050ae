#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/checkpoint.hpp"
#include "advnorm/errors.hpp"
#include "advnorm/hash.hpp"
#include "advnorm/losses.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/mvol_io.hpp"
#include "advnorm/networks.hpp"
#include "advnorm/optim.hpp"
#include "advnorm/pipeline.hpp"
#include "advnorm/rng.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

enum class TrainMode { SegmenterOnly, NoDiscriminator, Adversarial };

inline TrainMode train_mode_from_name(const std::string& s) {
    if (s == "segmenter_only") return TrainMode::SegmenterOnly;
    if (s == "no_discriminator") return TrainMode::NoDiscriminator;
    if (s == "adversarial") return TrainMode::Adversarial;
    throw ValidationError("unknown training mode '" + s + "'");
}

inline const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::SegmenterOnly: return "segmenter_only";
        case TrainMode::NoDiscriminator: return "no_discriminator";
        default: return "adversarial";
    }
}

inline bool mode_has_generator(TrainMode m) { return m != TrainMode::SegmenterOnly; }
inline bool mode_has_discriminator(TrainMode m) { return m == TrainMode::Adversarial; }

struct TrainConfig {
    std::string mode = "adversarial";
    int epochs = 50;
    int pretrain_epochs = 3;
    int batch_size = 8;
    double lr_g = 1e-5;
    double lr_s = 1e-4;
    double lr_d = 1e-4;
    double momentum = 0.9;
    double weight_decay = 0.1;
    int plateau_patience = 3;
    double plateau_factor = 10.0;
    std::uint64_t seed = 42;

    void validate() const {
        train_mode_from_name(mode);
        if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
        if (pretrain_epochs < 0 || pretrain_epochs > epochs)
            throw ValidationError("train: pretrain_epochs must be in [0, epochs]");
        if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
        if (!(lr_g > 0 && lr_s > 0 && lr_d > 0))
            throw ValidationError("train: learning rates must be positive");
        if (!(momentum >= 0 && momentum < 1))
            throw ValidationError("train: momentum must be in [0,1)");
        if (!(weight_decay >= 0)) throw ValidationError("train: weight_decay must be >= 0");
        if (plateau_patience < 1) throw ValidationError("train: plateau_patience must be >= 1");
        if (!(plateau_factor > 1)) throw ValidationError("train: plateau_factor must be > 1");
    }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
    j = nlohmann::ordered_json{
        {"mode", c.mode},
        {"epochs", c.epochs},
        {"pretrain_epochs", c.pretrain_epochs},
        {"batch_size", c.batch_size},
        {"lr_g", c.lr_g},
        {"lr_s", c.lr_s},
        {"lr_d", c.lr_d},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"plateau_patience", c.plateau_patience},
        {"plateau_factor", c.plateau_factor},
        {"seed", c.seed}};
}

inline void from_json(const nlohmann::ordered_json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("mode")) j.at("mode").get_to(c.mode);
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("pretrain_epochs")) j.at("pretrain_epochs").get_to(c.pretrain_epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("lr_g")) j.at("lr_g").get_to(c.lr_g);
    if (j.contains("lr_s")) j.at("lr_s").get_to(c.lr_s);
    if (j.contains("lr_d")) j.at("lr_d").get_to(c.lr_d);
    if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("plateau_patience")) j.at("plateau_patience").get_to(c.plateau_patience);
    if (j.contains("plateau_factor")) j.at("plateau_factor").get_to(c.plateau_factor);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

struct ModelConfig {
    // out_channels 0 (segmenter) and num_outputs 0 (discriminator) are
    // resolved from the data set: class count and domain count + 1. The
    // segmenter normalizes its features because its input arrives at raw
    // acquisition scale; the generator and discriminator must keep absolute
    // intensities visible, so they do not.
    UNetConfig generator{1, 1, 2, 8, "relu", false, true};
    UNetConfig segmenter{1, 0, 2, 8, "relu", true, false};
    DiscriminatorConfig discriminator{1, {8, 16, 32}, 0.2, 0};
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
    nlohmann::ordered_json g, s, d;
    to_json(g, c.generator);
    to_json(s, c.segmenter);
    to_json(d, c.discriminator);
    j = nlohmann::ordered_json{{"generator", g}, {"segmenter", s}, {"discriminator", d}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("generator")) from_json(j.at("generator"), c.generator);
    if (j.contains("segmenter")) from_json(j.at("segmenter"), c.segmenter);
    if (j.contains("discriminator")) from_json(j.at("discriminator"), c.discriminator);
}

template <typename T>
nn::Tensor<T> image_to_tensor(const Volume& v) {
    nn::Tensor<T> t(1, static_cast<int>(v.shape.nx), static_cast<int>(v.shape.ny),
                    static_cast<int>(v.shape.nz));
    for (std::size_t i = 0; i < v.data.size(); ++i) t.v[i] = static_cast<T>(v.data[i]);
    return t;
}

inline Volume tensor_to_volume(const nn::Tensor<float>& t, Spacing3 spacing) {
    Volume v;
    v.shape = {t.nx, t.ny, t.nz};
    v.spacing = spacing;
    v.data.assign(t.v.begin(), t.v.end());
    return v;
}

inline Volume tensor_to_volume(const nn::Tensor<double>& t, Spacing3 spacing) {
    Volume v;
    v.shape = {t.nx, t.ny, t.nz};
    v.spacing = spacing;
    v.data.resize(t.v.size());
    for (std::size_t i = 0; i < t.v.size(); ++i) v.data[i] = static_cast<float>(t.v[i]);
    return v;
}

/// The networks a trained run produces, plus everything needed to run them.
template <typename T>
struct ModelBundle {
    TrainMode mode = TrainMode::Adversarial;
    ModelConfig cfg;
    std::unique_ptr<UNet3d<T>> g;
    std::unique_ptr<UNet3d<T>> s;
    std::unique_ptr<Discriminator<T>> d;
    nn::ChannelSoftmax<T> s_softmax;
    std::vector<T> class_weights;
    int patch_side = 0; // window side the networks were trained on

    static ModelBundle build(TrainMode mode, ModelConfig cfg, int num_classes, int k_domains,
                             std::uint64_t seed) {
        ModelBundle b;
        b.mode = mode;
        if (cfg.segmenter.out_channels <= 0) cfg.segmenter.out_channels = num_classes;
        if (cfg.discriminator.num_outputs <= 0) cfg.discriminator.num_outputs = k_domains + 1;
        b.cfg = cfg;
        b.s = std::make_unique<UNet3d<T>>(cfg.segmenter, "s");
        if (mode_has_generator(mode)) b.g = std::make_unique<UNet3d<T>>(cfg.generator, "g");
        if (mode_has_discriminator(mode))
            b.d = std::make_unique<Discriminator<T>>(cfg.discriminator, "d");
        Rng rng_s = Rng::derive(seed, 0x494e4954ULL, 1);
        b.s->init_params(rng_s);
        if (b.g) {
            Rng rng_g = Rng::derive(seed, 0x494e4954ULL, 0);
            b.g->init_params(rng_g);
        }
        if (b.d) {
            Rng rng_d = Rng::derive(seed, 0x494e4954ULL, 2);
            b.d->init_params(rng_d);
        }
        return b;
    }

    /// Generator output for one image, or the image itself when no
    /// generator is part of this mode.
    nn::Tensor<T> normalize(const nn::Tensor<T>& x) { return g ? g->forward(x) : x; }

    /// Class probabilities for one image, via the generator when present.
    nn::Tensor<T> predict(const nn::Tensor<T>& x) {
        return s_softmax.forward(s->forward(normalize(x)));
    }

    std::uint64_t param_hash_g() { return g ? param_hash(*g) : 0; }
    std::uint64_t param_hash_s() { return param_hash(*s); }
    std::uint64_t param_hash_d() { return d ? param_hash(*d) : 0; }

    template <typename Net>
    static std::uint64_t param_hash(Net& net) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        net.visit_params([&](const nn::ParamRef<T>& p) {
            h = fnv1a(p.value->data(), p.value->size() * sizeof(T), h);
        });
        return h;
    }
};

/// Per-epoch metrics, null-like fields marked by NaN and skipped in the log.
struct EpochMetrics {
    int epoch = 0;
    std::string phase; // "pretrain" or "train"
    double train_obj_gs = std::numeric_limits<double>::quiet_NaN();
    double train_obj_d = std::numeric_limits<double>::quiet_NaN();
    double train_mse = std::numeric_limits<double>::quiet_NaN();
    double val_mse = std::numeric_limits<double>::quiet_NaN();
    double val_dice_loss = std::numeric_limits<double>::quiet_NaN();
    double val_obj_gs = std::numeric_limits<double>::quiet_NaN();
    double val_obj_d = std::numeric_limits<double>::quiet_NaN();
    double val_jsd = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> val_dice_per_class;
    double lr_g = std::numeric_limits<double>::quiet_NaN();
    double lr_s = std::numeric_limits<double>::quiet_NaN();
    double lr_d = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;

    nlohmann::ordered_json to_json_line() const {
        nlohmann::ordered_json j;
        j["epoch"] = epoch;
        j["phase"] = phase;
        auto put = [&](const char* k, double v) {
            if (!std::isnan(v)) j[k] = v;
        };
        put("train_obj_gs", train_obj_gs);
        put("train_obj_d", train_obj_d);
        put("train_mse", train_mse);
        put("val_mse", val_mse);
        put("val_dice_loss", val_dice_loss);
        put("val_obj_gs", val_obj_gs);
        put("val_obj_d", val_obj_d);
        put("val_jsd", val_jsd);
        if (!val_dice_per_class.empty()) j["val_dice_per_class"] = val_dice_per_class;
        put("lr_g", lr_g);
        put("lr_s", lr_s);
        put("lr_d", lr_d);
        j["seconds"] = seconds;
        return j;
    }
};

/// Deterministic epoch ordering of training patches: each domain's index
/// list is shuffled with a stream derived from (seed, epoch, domain), then
/// the lists are merged so every prefix holds domains in proportion to
/// their overall share (largest-deficit-first).
inline std::vector<std::size_t> epoch_order(const PatchSet& ps, std::uint64_t seed, int epoch) {
    std::vector<std::vector<std::size_t>> per_domain;
    for (int d = 1; d <= ps.k_domains; ++d) {
        auto idx = ps.indices_of(Split::Train, d);
        Rng rng = Rng::derive(seed, 0x45504f43ULL, static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(d));
        rng.shuffle(idx);
        per_domain.push_back(std::move(idx));
    }
    std::size_t total = 0;
    for (const auto& v : per_domain) total += v.size();
    std::vector<std::size_t> taken(per_domain.size(), 0);
    std::vector<std::size_t> order;
    order.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t pick = per_domain.size();
        long long best_deficit = std::numeric_limits<long long>::min();
        for (std::size_t d = 0; d < per_domain.size(); ++d) {
            if (taken[d] >= per_domain[d].size()) continue;
            // deficit of domain d after i emissions, scaled by total
            long long deficit = static_cast<long long>(per_domain[d].size() * (i + 1)) -
                                static_cast<long long>(taken[d] * total);
            if (deficit > best_deficit) {
                best_deficit = deficit;
                pick = d;
            }
        }
        order.push_back(per_domain[pick][taken[pick]]);
        ++taken[pick];
    }
    return order;
}

/// Called after every optimizer step with the batch objective values;
/// obj_d is NaN for modes without a discriminator.
using BatchHook = std::function<void(int epoch, int batch, double obj_gs, double obj_d)>;

template <typename T>
class Trainer {
public:
    Trainer(ModelConfig model_cfg, TrainConfig train_cfg, LossConfig loss_cfg, const PatchSet& ps,
            std::filesystem::path out_dir)
        : train_cfg_(std::move(train_cfg)), loss_cfg_(std::move(loss_cfg)), ps_(&ps),
          out_dir_(std::move(out_dir)) {
        train_cfg_.validate();
        loss_cfg_.validate();
        mode_ = train_mode_from_name(train_cfg_.mode);
        if (ps.indices_of(Split::Train).empty())
            throw ValidationError("train: patch set has no training patches");
        bundle_ = ModelBundle<T>::build(mode_, std::move(model_cfg), ps.num_classes, ps.k_domains,
                                        train_cfg_.seed);
        bundle_.patch_side = ps.patch_size;
        if (train_cfg_.weight_decay > 0.01)
            std::fprintf(stderr,
                         "warning: weight_decay %.3g is aggressive for networks this small; "
                         "expect strong shrinkage of kernels\n",
                         train_cfg_.weight_decay);
        resolve_weights();
        build_optimizers();
        config_hash_ = compute_config_hash();
        std::filesystem::create_directories(out_dir_ / "checkpoints");
    }

    ModelBundle<T>& bundle() { return bundle_; }
    const TrainConfig& config() const { return train_cfg_; }
    const std::vector<EpochMetrics>& history() const { return history_; }
    std::uint64_t config_hash() const { return config_hash_; }

    /// Trains from the current epoch up to config.epochs, logging one
    /// NDJSON line and writing one checkpoint per epoch.
    void run(const BatchHook& hook = {}) {
        std::ofstream log(out_dir_ / "metrics.ndjson", std::ios::app);
        if (!log) throw ValidationError("cannot open metrics log in " + out_dir_.string());
        for (int epoch = epoch_ + 1; epoch <= train_cfg_.epochs; ++epoch) {
            auto t0 = std::chrono::steady_clock::now();
            const bool pretrain = bundle_.g && epoch <= train_cfg_.pretrain_epochs;
            EpochMetrics m;
            m.epoch = epoch;
            m.phase = pretrain ? "pretrain" : "train";
            train_pass(epoch, pretrain, m, hook);
            validate(m);
            if (!pretrain) {
                // G and S are scheduled on the segmentation loss alone; the
                // fooling term swings with the discriminator and would trip
                // the patience long before the task stops improving.
                if (sched_gs_.observe(m.val_dice_loss)) {
                    if (opt_g_) opt_g_->set_lr(opt_g_->lr() / sched_gs_.factor());
                    opt_s_->set_lr(opt_s_->lr() / sched_gs_.factor());
                }
                if (opt_d_ && sched_d_.observe(m.val_obj_d))
                    opt_d_->set_lr(opt_d_->lr() / sched_d_.factor());
            }
            if (opt_g_) m.lr_g = opt_g_->lr();
            m.lr_s = opt_s_->lr();
            if (opt_d_) m.lr_d = opt_d_->lr();
            m.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            history_.push_back(m);
            log << m.to_json_line().dump() << "\n";
            log.flush();
            epoch_ = epoch;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "epoch_%04d.mvol", epoch);
            save_checkpoint(out_dir_ / "checkpoints" / buf);
            save_checkpoint(out_dir_ / "checkpoints" / "last.mvol");
        }
    }

    /// Restores parameters, momentum, schedulers, learning rates and the
    /// epoch counter; a following run() continues bit-exactly.
    void resume(const std::filesystem::path& ckpt) {
        auto [header, payload] = mvol::read_container(ckpt);
        if (header.value("kind", "") != "checkpoint")
            throw FormatError(ckpt.string() + " is not a checkpoint");
        if (header.value("dtype", "") != scalar_dtype_name<T>())
            throw ValidationError("checkpoint dtype " + header.value("dtype", std::string()) +
                                  " does not match this build's " + scalar_dtype_name<T>());
        const std::string h = header.value("config_hash", "");
        if (h != hex64(config_hash_))
            throw ValidationError("checkpoint config hash " + h + " does not match " +
                                  hex64(config_hash_) + "; resume needs the identical config");
        TensorArchiveReader<T> ar(header.at("tensors"), std::move(payload));
        auto load_net = [&](auto& net) {
            net.visit_params([&](const nn::ParamRef<T>& p) { ar.read(p.name, *p.value); });
        };
        load_net(*bundle_.s);
        if (bundle_.g) load_net(*bundle_.g);
        if (bundle_.d) load_net(*bundle_.d);
        auto load_velocity = [&](Sgd<T>& opt) {
            opt.visit_velocity([&](const std::string& name, const std::vector<int>&,
                                   std::vector<T>& v) { ar.read("m." + name, v); });
        };
        load_velocity(*opt_s_);
        if (opt_g_) load_velocity(*opt_g_);
        if (opt_d_) load_velocity(*opt_d_);
        sched_gs_ = PlateauScheduler::from_state(header.at("schedulers").at("gs"));
        if (bundle_.d) sched_d_ = PlateauScheduler::from_state(header.at("schedulers").at("d"));
        if (opt_g_) opt_g_->set_lr(header.at("lr").at("g").get<double>());
        opt_s_->set_lr(header.at("lr").at("s").get<double>());
        if (opt_d_) opt_d_->set_lr(header.at("lr").at("d").get<double>());
        bundle_.class_weights.clear();
        for (double w : header.at("class_weights").get<std::vector<double>>())
            bundle_.class_weights.push_back(static_cast<T>(w));
        epoch_ = header.at("epoch").get<int>();
    }

    void save_checkpoint(const std::filesystem::path& path) const {
        TensorArchiveWriter<T> ar;
        auto dump_net = [&](auto& net) {
            net.visit_params(
                [&](const nn::ParamRef<T>& p) { ar.add(p.name, p.shape, *p.value); });
        };
        dump_net(*bundle_.s);
        if (bundle_.g) dump_net(*bundle_.g);
        if (bundle_.d) dump_net(*bundle_.d);
        auto dump_velocity = [&](Sgd<T>& opt) {
            opt.visit_velocity([&](const std::string& name, const std::vector<int>& shape,
                                   std::vector<T>& v) { ar.add("m." + name, shape, v); });
        };
        dump_velocity(*opt_s_);
        if (opt_g_) dump_velocity(*opt_g_);
        if (opt_d_) dump_velocity(*opt_d_);

        nlohmann::ordered_json h;
        h["magic"] = mvol::kMagic;
        h["version"] = mvol::kVersion;
        h["kind"] = "checkpoint";
        h["mode"] = train_mode_name(mode_);
        h["epoch"] = epoch_;
        h["seed"] = train_cfg_.seed;
        h["config_hash"] = hex64(config_hash_);
        h["dtype"] = scalar_dtype_name<T>();
        h["patch_side"] = ps_->patch_size;
        nlohmann::ordered_json lr;
        if (opt_g_) lr["g"] = opt_g_->lr();
        lr["s"] = opt_s_->lr();
        if (opt_d_) lr["d"] = opt_d_->lr();
        h["lr"] = lr;
        nlohmann::ordered_json sch;
        sch["gs"] = sched_gs_.state();
        if (bundle_.d) sch["d"] = sched_d_.state();
        h["schedulers"] = sch;
        std::vector<double> w(bundle_.class_weights.begin(), bundle_.class_weights.end());
        h["class_weights"] = w;
        nlohmann::ordered_json model;
        to_json(model, bundle_.cfg);
        h["model"] = model;
        nlohmann::ordered_json train_j;
        to_json(train_j, train_cfg_);
        h["train"] = train_j;
        nlohmann::ordered_json loss_j;
        to_json(loss_j, loss_cfg_);
        h["loss"] = loss_j;
        h["tensors"] = ar.index();
        mvol::write_container(path, h, ar.payload().data(), ar.payload().size());
    }

    int last_epoch() const { return epoch_; }

private:
    void resolve_weights() {
        std::vector<const SegmentationMask*> masks;
        for (std::size_t i : ps_->indices_of(Split::Train)) masks.push_back(&ps_->patches[i].mask);
        bundle_.class_weights = resolve_class_weights<T>(loss_cfg_, masks, ps_->num_classes);
    }

    void build_optimizers() {
        opt_s_ = std::make_unique<Sgd<T>>(collect_params<T>(*bundle_.s), train_cfg_.lr_s,
                                          train_cfg_.momentum, train_cfg_.weight_decay);
        if (bundle_.g)
            opt_g_ = std::make_unique<Sgd<T>>(collect_params<T>(*bundle_.g), train_cfg_.lr_g,
                                              train_cfg_.momentum, train_cfg_.weight_decay);
        if (bundle_.d)
            opt_d_ = std::make_unique<Sgd<T>>(collect_params<T>(*bundle_.d), train_cfg_.lr_d,
                                              train_cfg_.momentum, train_cfg_.weight_decay);
        sched_gs_ = PlateauScheduler(train_cfg_.plateau_patience, train_cfg_.plateau_factor);
        sched_d_ = PlateauScheduler(train_cfg_.plateau_patience, train_cfg_.plateau_factor);
    }

    std::uint64_t compute_config_hash() const {
        nlohmann::ordered_json j;
        nlohmann::ordered_json model;
        to_json(model, bundle_.cfg);
        nlohmann::ordered_json train_j;
        to_json(train_j, train_cfg_);
        nlohmann::ordered_json loss_j;
        to_json(loss_j, loss_cfg_);
        j["model"] = model;
        j["train"] = train_j;
        j["loss"] = loss_j;
        return fnv1a(j.dump());
    }

    void train_pass(int epoch, bool pretrain, EpochMetrics& m, const BatchHook& hook) {
        const auto order = epoch_order(*ps_, train_cfg_.seed, epoch);
        double sum_gs = 0.0, sum_d = 0.0, sum_mse = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += train_cfg_.batch_size) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(train_cfg_.batch_size));
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            if (pretrain) {
                sum_mse += pretrain_step(batch);
                ++batches;
                continue;
            }
            double obj_d = std::numeric_limits<double>::quiet_NaN();
            const std::uint64_t d_before = bundle_.param_hash_d();
            const double obj_gs = step_gs(batch);
            if (bundle_.d && bundle_.param_hash_d() != d_before)
                throw std::logic_error("discriminator changed during a generator/segmenter step");
            if (bundle_.d) {
                const std::uint64_t g_before = bundle_.param_hash_g();
                const std::uint64_t s_before = bundle_.param_hash_s();
                obj_d = step_d(batch);
                if (bundle_.param_hash_g() != g_before || bundle_.param_hash_s() != s_before)
                    throw std::logic_error(
                        "generator or segmenter changed during a discriminator step");
            }
            sum_gs += obj_gs;
            if (bundle_.d) sum_d += obj_d;
            ++batches;
            if (hook) hook(epoch, batches - 1, obj_gs, obj_d);
        }
        if (pretrain) {
            m.train_mse = sum_mse / std::max(1, batches);
        } else {
            m.train_obj_gs = sum_gs / std::max(1, batches);
            if (bundle_.d) m.train_obj_d = sum_d / std::max(1, batches);
        }
    }

public:
    /// One generator + segmenter update over a batch; the discriminator is
    /// only read. Returns the batch objective.
    double step_gs(const std::vector<std::size_t>& batch) {
        if (bundle_.g) bundle_.g->zero_grads();
        bundle_.s->zero_grads();
        std::vector<T> dice_vals, fake_vals;
        const T lambda = static_cast<T>(loss_cfg_.lambda);
        for (std::size_t idx : batch) {
            const Patch& p = ps_->patches[idx];
            nn::Tensor<T> x = image_to_tensor<T>(p.image);
            nn::Tensor<T> y = mask_to_onehot<T>(p.mask);
            nn::Tensor<T> gx = bundle_.g ? bundle_.g->forward(x) : x;
            nn::Tensor<T> probs = bundle_.s_softmax.forward(bundle_.s->forward(gx));
            auto dl = weighted_dice_loss(probs, y, bundle_.class_weights,
                                         static_cast<T>(loss_cfg_.epsilon));
            dice_vals.push_back(dl.value);
            nn::Tensor<T> g_gx =
                bundle_.s->backward(bundle_.s_softmax.backward(dl.grad), true);
            if (bundle_.d) {
                auto pd = bundle_.d->forward(gx);
                auto fl = dis_loss_fake(pd);
                fake_vals.push_back(fl.value);
                for (auto& v : fl.grad) v *= -lambda;
                nn::Tensor<T> g_adv = bundle_.d->backward(fl.grad, false);
                for (std::size_t i = 0; i < g_gx.v.size(); ++i) g_gx.v[i] += g_adv.v[i];
            }
            if (bundle_.g) bundle_.g->backward(g_gx, true);
        }
        const double obj = static_cast<double>(objective_gs(dice_vals, fake_vals, lambda));
        guard_finite(obj, "generator/segmenter objective");
        if (opt_g_) opt_g_->step();
        opt_s_->step();
        return obj;
    }

    /// One discriminator update: real patches against their domain labels,
    /// freshly generated patches against the synthetic class. The generator
    /// is only read. Returns the batch objective.
    double step_d(const std::vector<std::size_t>& batch) {
        bundle_.d->zero_grads();
        std::vector<T> real_vals, fake_vals;
        for (std::size_t idx : batch) {
            const Patch& p = ps_->patches[idx];
            nn::Tensor<T> x = image_to_tensor<T>(p.image);
            auto pr = bundle_.d->forward(x);
            auto rl = dis_loss_real(pr, p.domain);
            real_vals.push_back(rl.value);
            bundle_.d->backward(rl.grad, true);
            nn::Tensor<T> gx = bundle_.g->forward(x);
            auto pf = bundle_.d->forward(gx);
            auto fl = dis_loss_fake(pf);
            fake_vals.push_back(fl.value);
            bundle_.d->backward(fl.grad, true);
        }
        const double obj = static_cast<double>(objective_d(real_vals, fake_vals));
        guard_finite(obj, "discriminator objective");
        opt_d_->step();
        return obj;
    }

    /// One generator-only reconstruction update; returns the batch mean of
    /// per-patch voxel MSE between G(x) and x.
    double pretrain_step(const std::vector<std::size_t>& batch) {
        bundle_.g->zero_grads();
        double mse_sum = 0.0;
        for (std::size_t idx : batch) {
            nn::Tensor<T> x = image_to_tensor<T>(ps_->patches[idx].image);
            nn::Tensor<T> gx = bundle_.g->forward(x);
            const T inv_n = T(1) / static_cast<T>(x.v.size());
            nn::Tensor<T> grad(gx.ch, gx.nx, gx.ny, gx.nz);
            double mse = 0.0;
            for (std::size_t i = 0; i < x.v.size(); ++i) {
                const T diff = gx.v[i] - x.v[i];
                mse += static_cast<double>(diff) * static_cast<double>(diff);
                grad.v[i] = T(2) * diff * inv_n;
            }
            mse_sum += mse / static_cast<double>(x.v.size());
            bundle_.g->backward(grad, true);
        }
        const double mean = mse_sum / static_cast<double>(batch.size());
        guard_finite(mean, "pretraining reconstruction loss");
        opt_g_->step();
        return mean;
    }

private:
    void validate(EpochMetrics& m) {
        const auto idx = ps_->indices_of(Split::Validation);
        if (idx.empty()) return;
        std::vector<T> dice_vals, fake_vals, real_vals;
        double mse_sum = 0.0;
        DiceAccumulator hard(ps_->num_classes);
        std::vector<std::vector<float>> intensity_sets;
        for (std::size_t i : idx) {
            const Patch& p = ps_->patches[i];
            nn::Tensor<T> x = image_to_tensor<T>(p.image);
            nn::Tensor<T> y = mask_to_onehot<T>(p.mask);
            nn::Tensor<T> gx = bundle_.g ? bundle_.g->forward(x) : x;
            if (bundle_.g) {
                double mse = 0.0;
                for (std::size_t k = 0; k < x.v.size(); ++k) {
                    const double diff = static_cast<double>(gx.v[k]) - static_cast<double>(x.v[k]);
                    mse += diff * diff;
                }
                mse_sum += mse / static_cast<double>(x.v.size());
            }
            nn::Tensor<T> probs = bundle_.s_softmax.forward(bundle_.s->forward(gx));
            auto dl = weighted_dice_loss(probs, y, bundle_.class_weights,
                                         static_cast<T>(loss_cfg_.epsilon));
            dice_vals.push_back(dl.value);
            auto labels = argmax_labels(probs);
            hard.add(labels.data(), p.mask.labels.data(), labels.size());
            Volume gvol = tensor_to_volume(gx, p.image.spacing);
            auto fg = foreground_intensities(gvol, p.mask);
            if (!fg.empty()) intensity_sets.push_back(std::move(fg));
            if (bundle_.d) {
                auto pr = bundle_.d->forward(x);
                real_vals.push_back(dis_loss_real(pr, p.domain).value);
                auto pf = bundle_.d->forward(gx);
                fake_vals.push_back(dis_loss_fake(pf).value);
            }
        }
        double dice_sum = 0.0;
        for (T v : dice_vals) dice_sum += static_cast<double>(v);
        m.val_dice_loss = dice_sum / static_cast<double>(dice_vals.size());
        for (const auto& c : hard.per_class()) m.val_dice_per_class.push_back(c.dice);
        if (intensity_sets.size() >= 2) m.val_jsd = population_jsd(intensity_sets);
        m.val_obj_gs = static_cast<double>(
            objective_gs(dice_vals, fake_vals, static_cast<T>(loss_cfg_.lambda)));
        if (bundle_.d) m.val_obj_d = static_cast<double>(objective_d(real_vals, fake_vals));
        if (bundle_.g) m.val_mse = mse_sum / static_cast<double>(idx.size());
    }

    /// Writes a rescue checkpoint of the current (still finite) parameters
    /// and an error report before raising.
    void guard_finite(double value, const std::string& what) {
        if (std::isfinite(value)) return;
        save_checkpoint(out_dir_ / "checkpoints" / "diverged.mvol");
        const std::string msg = what + " became non-finite at epoch " +
                                std::to_string(epoch_ + 1) +
                                "; last finite state saved to checkpoints/diverged.mvol";
        nlohmann::ordered_json rep;
        rep["error"] = "divergence";
        rep["detail"] = msg;
        rep["epoch"] = epoch_ + 1;
        std::ofstream f(out_dir_ / "error.json");
        if (f) f << rep.dump(2) << "\n";
        throw DivergenceError(msg);
    }

    TrainConfig train_cfg_;
    LossConfig loss_cfg_;
    const PatchSet* ps_;
    std::filesystem::path out_dir_;
    TrainMode mode_ = TrainMode::Adversarial;
    ModelBundle<T> bundle_;
    std::unique_ptr<Sgd<T>> opt_g_, opt_s_, opt_d_;
    PlateauScheduler sched_gs_, sched_d_;
    int epoch_ = 0;
    std::uint64_t config_hash_ = 0;
    std::vector<EpochMetrics> history_;
};

/// Rebuilds just the networks from a checkpoint, for inference.
template <typename T>
ModelBundle<T> load_model_bundle(const std::filesystem::path& ckpt) {
    auto [header, payload] = mvol::read_container(ckpt);
    if (header.value("kind", "") != "checkpoint")
        throw FormatError(ckpt.string() + " is not a checkpoint");
    if (header.value("dtype", "") != scalar_dtype_name<T>())
        throw ValidationError("checkpoint dtype " + header.value("dtype", std::string()) +
                              " does not match this build's " + scalar_dtype_name<T>());
    TrainMode mode = train_mode_from_name(header.at("mode").get<std::string>());
    ModelConfig cfg;
    from_json(header.at("model"), cfg);
    std::uint64_t seed = header.at("seed").get<std::uint64_t>();
    ModelBundle<T> b = ModelBundle<T>::build(mode, cfg, cfg.segmenter.out_channels,
                                             cfg.discriminator.num_outputs - 1, seed);
    TensorArchiveReader<T> ar(header.at("tensors"), std::move(payload));
    auto load_net = [&](auto& net) {
        net.visit_params([&](const nn::ParamRef<T>& p) { ar.read(p.name, *p.value); });
    };
    load_net(*b.s);
    if (b.g) load_net(*b.g);
    if (b.d) load_net(*b.d);
    b.class_weights.clear();
    for (double w : header.at("class_weights").get<std::vector<double>>())
        b.class_weights.push_back(static_cast<T>(w));
    b.patch_side = header.value("patch_side", 0);
    return b;
}

} // namespace advnorm
