// Command line front end: phantom data generation, preprocessing, training,
// evaluation, whole-volume normalization and the cross-domain study matrix.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advnorm/advnorm.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using Scalar = float;

ordered_json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw advnorm::ValidationError("cannot open config " + path.string());
    ordered_json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw advnorm::ValidationError("config " + path.string() + " is not valid JSON: " +
                                       e.what());
    }
    return j;
}

advnorm::ExperimentConfig load_experiment_config(const std::string& config_path) {
    advnorm::ExperimentConfig cfg;
    if (!config_path.empty()) from_json(read_json_file(config_path), cfg);
    return cfg;
}

void write_resolved_config(const fs::path& out_dir, const ordered_json& j) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir / "resolved_config.json");
    if (!f)
        throw advnorm::ValidationError("cannot write resolved_config.json in " + out_dir.string());
    f << j.dump(2) << "\n";
}

std::array<double, 3> parse_split(const std::string& s) {
    std::array<double, 3> out{};
    std::stringstream ss(s);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= 3) throw advnorm::ValidationError("--split needs exactly three fractions");
        out[static_cast<std::size_t>(i++)] = std::stod(tok);
    }
    if (i != 3) throw advnorm::ValidationError("--split needs exactly three fractions");
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"task and data driven intensity normalization for multi-domain 3-D segmentation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, mode, manifest_dir, patches_dir, input_path;
    std::string split_str, matrix_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int patch_size = 0, stride = 0;
    double target_spacing = 0.0;
    bool standardize = false;
    std::string resume_path;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the configured seed")
            ->each([&](const std::string&) { seed_set = true; });
    };

    auto* c_phantom = app.add_subcommand("phantom", "generate a synthetic multi-domain data set");
    c_phantom->add_option("--config", config_path, "experiment config JSON");
    c_phantom->add_option("--out", out_dir, "output directory")->required();
    add_seed(c_phantom);

    auto* c_pre = app.add_subcommand("preprocess", "strip, resample and cut a data set into patches");
    c_pre->add_option("--manifest", manifest_dir, "data set directory holding manifest.json")
        ->required();
    c_pre->add_option("--out", out_dir, "output directory")->required();
    c_pre->add_option("--config", config_path, "experiment config JSON");
    c_pre->add_option("--patch-size", patch_size, "cubic patch side");
    c_pre->add_option("--stride", stride, "patch grid stride");
    c_pre->add_option("--target-spacing", target_spacing, "isotropic voxel spacing in mm");
    c_pre->add_option("--split", split_str, "train,val,test fractions, e.g. 0.6,0.2,0.2");
    c_pre->add_flag("--standardize", standardize, "zero-mean unit-variance foreground per volume");
    add_seed(c_pre);

    auto* c_train = app.add_subcommand("train", "train networks on a preprocessed patch set");
    c_train->add_option("--patches", patches_dir, "patch set directory")->required();
    c_train->add_option("--out", out_dir, "output directory")->required();
    c_train->add_option("--config", config_path, "experiment config JSON");
    c_train->add_option("--mode", mode, "training mode")
        ->check(CLI::IsMember({"adversarial", "no_discriminator", "segmenter_only"}));
    c_train->add_option("--resume", resume_path, "checkpoint to continue from");
    add_seed(c_train);

    std::string eval_split = "test";
    auto* c_eval = app.add_subcommand("evaluate", "hard Dice of a checkpoint on a patch set split");
    c_eval->add_option("--patches", patches_dir, "patch set directory")->required();
    c_eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    c_eval->add_option("--out", out_dir, "output directory")->required();
    c_eval->add_option("--split", eval_split, "which split to score")
        ->check(CLI::IsMember({"train", "validation", "test"}));

    auto* c_norm = app.add_subcommand("normalize", "run the generator over a whole volume");
    c_norm->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    c_norm->add_option("--input", input_path, "input volume (.mvol)")->required();
    c_norm->add_option("--out", out_dir, "output directory")->required();
    c_norm->add_option("--stride", stride, "window stride (default half the window side)");

    auto* c_report = app.add_subcommand("report", "print and rewrite the study report table");
    c_report->add_option("--rundir", matrix_dir, "matrix run directory holding report.json")
        ->required();

    auto* c_matrix = app.add_subcommand("matrix", "run the full seven-row cross-domain study");
    c_matrix->add_option("--config", config_path, "experiment config JSON");
    c_matrix->add_option("--out", out_dir, "output directory")->required();
    add_seed(c_matrix);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // help/version exit 0; any usage problem exits 1 after the message
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (c_phantom->parsed()) {
        advnorm::ExperimentConfig cfg = load_experiment_config(config_path);
        if (seed_set) cfg.phantom.seed = seed;
        cfg.phantom.validate();
        ordered_json resolved;
        to_json(resolved, cfg.phantom);
        write_resolved_config(out_dir, resolved);
        auto manifest = advnorm::generate_domain_dataset(cfg.phantom, out_dir);
        std::cout << "wrote " << manifest.samples.size() << " volumes for "
                  << cfg.phantom.domains.size() << " domains to " << out_dir << "\n";
        return 0;
    }

    if (c_pre->parsed()) {
        advnorm::ExperimentConfig cfg = load_experiment_config(config_path);
        advnorm::PipelineConfig pl = cfg.pipeline;
        if (patch_size > 0) pl.patch_size = patch_size;
        if (stride > 0) pl.stride = stride;
        if (target_spacing > 0) pl.target_spacing = target_spacing;
        if (!split_str.empty()) pl.split_fractions = parse_split(split_str);
        if (standardize) pl.standardize = true;
        pl.validate();
        const std::uint64_t split_seed = seed_set ? seed : cfg.train.seed;
        fs::path mpath = manifest_dir;
        if (fs::is_directory(mpath)) mpath /= advnorm::kManifestName;
        auto manifest = advnorm::load_manifest(mpath);
        ordered_json resolved;
        to_json(resolved, pl);
        resolved["manifest"] = mpath.string();
        resolved["seed"] = split_seed;
        write_resolved_config(out_dir, resolved);
        advnorm::PatchSet ps =
            advnorm::preprocess_dataset(mpath.parent_path(), manifest, pl, split_seed);
        advnorm::save_patch_set(ps, out_dir);
        std::cout << "wrote " << ps.patches.size() << " patches ("
                  << ps.indices_of(advnorm::Split::Train).size() << " train, "
                  << ps.indices_of(advnorm::Split::Validation).size() << " val, "
                  << ps.indices_of(advnorm::Split::Test).size() << " test) to " << out_dir << "\n";
        return 0;
    }

    if (c_train->parsed()) {
        advnorm::ExperimentConfig cfg = load_experiment_config(config_path);
        if (!mode.empty()) cfg.train.mode = mode;
        if (seed_set) cfg.train.seed = seed;
        advnorm::PatchSet ps = advnorm::load_patch_set(patches_dir);
        ordered_json resolved;
        ordered_json model_j, train_j, loss_j;
        to_json(model_j, cfg.model);
        to_json(train_j, cfg.train);
        to_json(loss_j, cfg.loss);
        resolved["model"] = model_j;
        resolved["train"] = train_j;
        resolved["loss"] = loss_j;
        resolved["patches"] = patches_dir;
        write_resolved_config(out_dir, resolved);
        advnorm::Trainer<Scalar> trainer(cfg.model, cfg.train, cfg.loss, ps, out_dir);
        if (!resume_path.empty()) trainer.resume(resume_path);
        trainer.run();
        std::cout << "trained " << cfg.train.mode << " to epoch " << trainer.last_epoch()
                  << "; checkpoints in " << (fs::path(out_dir) / "checkpoints").string() << "\n";
        return 0;
    }

    if (c_eval->parsed()) {
        advnorm::PatchSet ps = advnorm::load_patch_set(patches_dir);
        auto bundle = advnorm::load_model_bundle<Scalar>(checkpoint);
        ordered_json resolved{
            {"patches", patches_dir}, {"checkpoint", checkpoint}, {"split", eval_split}};
        write_resolved_config(out_dir, resolved);
        advnorm::EvalResult r =
            advnorm::evaluate_bundle(bundle, ps, advnorm::split_from_name(eval_split));
        ordered_json j;
        j["split"] = eval_split;
        j["patches"] = r.patches;
        j["per_class_dice"] = ordered_json::array();
        for (const auto& c : r.per_class) {
            ordered_json e{{"dice", c.dice}, {"both_empty", c.both_empty}};
            j["per_class_dice"].push_back(e);
        }
        j["mean_foreground_dice"] = r.mean_foreground;
        std::ofstream f(fs::path(out_dir) / "metrics.json");
        f << j.dump(2) << "\n";
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    if (c_norm->parsed()) {
        auto bundle = advnorm::load_model_bundle<Scalar>(checkpoint);
        if (!bundle.g)
            throw advnorm::ValidationError(
                "checkpoint was trained without a generator (mode segmenter_only); "
                "nothing to normalize with");
        if (bundle.patch_side < 1)
            throw advnorm::ValidationError("checkpoint does not record a usable window side");
        const int side = bundle.patch_side;
        const int st = stride > 0 ? stride : std::max(1, side / 2);
        advnorm::Volume img = advnorm::load_volume(input_path);
        ordered_json resolved{{"checkpoint", checkpoint},
                              {"input", input_path},
                              {"window_side", side},
                              {"stride", st}};
        write_resolved_config(out_dir, resolved);
        advnorm::Volume out = advnorm::normalize_volume(bundle, img, side, st);
        advnorm::save_volume(out, fs::path(out_dir) / "normalized.mvol");
        std::cout << "wrote " << (fs::path(out_dir) / "normalized.mvol").string() << "\n";
        return 0;
    }

    if (c_report->parsed()) {
        ordered_json j = read_json_file(fs::path(matrix_dir) / "report.json");
        advnorm::MatrixResult res;
        for (const auto& rj : j.at("rows")) {
            advnorm::RowResult r;
            r.row = rj.at("row").get<int>();
            r.name = rj.at("name").get<std::string>();
            r.mode = rj.at("mode").get<std::string>();
            r.trained_on = rj.at("trained_on").get<std::string>();
            r.tested_on = rj.at("tested_on").get<std::string>();
            r.per_class_dice = rj.at("per_class_dice").get<std::vector<double>>();
            if (rj.contains("empty_classes"))
                r.empty_classes = rj.at("empty_classes").get<std::vector<int>>();
            if (!rj.at("mean_dice").is_null()) r.mean_dice = rj.at("mean_dice").get<double>();
            if (rj.contains("jsd_before")) r.jsd_before = rj.at("jsd_before").get<double>();
            if (rj.contains("jsd_after")) r.jsd_after = rj.at("jsd_after").get<double>();
            r.checkpoint = rj.at("checkpoint").get<std::string>();
            r.config_hash = rj.value("config_hash", "");
            r.failed = rj.value("failed", false);
            r.error = rj.value("error", "");
            r.seconds = rj.at("seconds").get<double>();
            res.rows.push_back(r);
        }
        advnorm::write_matrix_reports(res, matrix_dir);
        std::ifstream t(fs::path(matrix_dir) / "report.txt");
        std::cout << t.rdbuf();
        return 0;
    }

    if (c_matrix->parsed()) {
        advnorm::ExperimentConfig cfg = load_experiment_config(config_path);
        if (seed_set) {
            cfg.phantom.seed = seed;
            cfg.train.seed = seed;
        }
        advnorm::MatrixResult res = advnorm::run_experiment_matrix<Scalar>(cfg, out_dir);
        std::ifstream t(fs::path(out_dir) / "report.txt");
        std::cout << t.rdbuf();
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const advnorm::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
