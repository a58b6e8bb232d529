// unips: universal photometric stereo at desk scale.
// Subcommands wire the pipeline: data generation, geometry-prior
// pretraining, full training, evaluation/ablation, inference and export.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "unips/dataset.hpp"
#include "unips/eval.hpp"
#include "unips/image_io.hpp"
#include "unips/pipeline.hpp"
#include "unips/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unips;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(cat("cannot open config file: ", path));
    try {
        return json::parse(std::string((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>()));
    } catch (const json::exception& e) {
        throw ConfigError(cat(path, ": ", e.what()));
    }
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(cat("cannot write ", path));
    out << content;
}

// Refuses to write into an existing non-empty directory unless --overwrite.
void prepare_out_dir(const std::string& dir, bool overwrite) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) {
            throw IoError(cat("output directory '", dir,
                              "' is not empty; pass --overwrite to reuse it"));
        }
    } else {
        fs::create_directories(dir);
    }
}

// Resolved-config snapshot: every run records what it actually ran with.
void snapshot_config(const std::string& out_dir, const std::string& subcommand, uint64_t seed,
                     const json& resolved) {
    json snap;
    snap["subcommand"] = subcommand;
    snap["seed"] = seed;
    snap["resolved"] = resolved;
    write_text((fs::path(out_dir) / "resolved_config.json").string(), snap.dump(2) + "\n");
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig base;
    if (j.contains("preset")) {
        const std::string preset = j.at("preset");
        if (preset == "desk") base = ModelConfig::desk();
        else if (preset == "paper") base = ModelConfig::paper_scale();
        else throw ConfigError(cat("unknown model preset '", preset, "'"));
    }
    json overrides = j;
    overrides.erase("preset");
    return ModelConfig::from_json(overrides.dump(), base);
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("batch_scenes", c.batch_scenes);
    get("k_min", c.k_min);
    get("k_max", c.k_max);
    get("p_train", c.p_train);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("decay_factor", c.decay_factor);
    get("decay_every_epochs", c.decay_every_epochs);
    get("warmup_epochs", c.warmup_epochs);
    get("clip_norm", c.clip_norm);
    get("seed", c.seed);
    get("checkpoint_every_epochs", c.checkpoint_every_epochs);
    get("iters_per_epoch", c.iters_per_epoch);
    get("val_scene_cap", c.val_scene_cap);
    get("val_k", c.val_k);
    return c;
}

struct RunFileConfig {
    json raw;
    std::string manifest_path;
    std::string out_dir;
    ModelConfig model;
    TrainConfig train;
    std::string geo_pretrain;
};

RunFileConfig load_run_config(const std::string& path) {
    RunFileConfig rc;
    rc.raw = read_json_file(path);
    if (!rc.raw.contains("data")) throw ConfigError(cat(path, ": missing 'data' manifest path"));
    if (!rc.raw.contains("out_dir")) throw ConfigError(cat(path, ": missing 'out_dir'"));
    rc.manifest_path = rc.raw.at("data");
    rc.out_dir = rc.raw.at("out_dir");
    rc.model = model_config_from_json(rc.raw.value("model", json::object()));
    rc.train = train_config_from_json(rc.raw.value("train", json::object()));
    rc.train.manifest_path = rc.manifest_path;
    rc.train.out_dir = rc.out_dir;
    rc.geo_pretrain = rc.raw.value("geo_pretrain", "");
    return rc;
}

int run_gen_data(const std::string& config_path, const std::string& out,
                 uint64_t seed, bool overwrite, bool verbose) {
    GenConfig cfg =
        config_path.empty() ? GenConfig() : gen_config_from_json_file(config_path);
    prepare_out_dir(out, overwrite);
    Manifest m = gen_dataset(cfg, out, seed);
    snapshot_config(out, "gen-data", seed, json::parse(gen_config_to_json(cfg)));
    if (verbose) {
        std::printf("scenes: %zu (train %zu / val %zu / test %zu)\n", m.scenes.size(),
                    m.split("train").size(), m.split("val").size(), m.split("test").size());
    }
    std::printf("wrote %zu scenes to %s\n", m.scenes.size(), out.c_str());
    return 0;
}

int run_pretrain(const std::string& config_path, bool overwrite) {
    RunFileConfig rc = load_run_config(config_path);
    prepare_out_dir(rc.out_dir, overwrite);
    Manifest manifest = load_manifest(rc.manifest_path);
    snapshot_config(rc.out_dir, "pretrain-geo", rc.train.seed, rc.raw);
    TrainResult result = pretrain_geo(rc.train, rc.model, manifest);
    std::printf("pretrain: token MAE %.2f deg -> %.2f deg; checkpoint %s\n",
                result.init_val_mae, result.final_val_mae, result.checkpoint_path.c_str());
    return 0;
}

int run_train(const std::string& config_path, const std::string& resume, bool overwrite) {
    RunFileConfig rc = load_run_config(config_path);
    prepare_out_dir(rc.out_dir, overwrite);
    Manifest manifest = load_manifest(rc.manifest_path);
    snapshot_config(rc.out_dir, "train", rc.train.seed, rc.raw);
    TrainResult result = train_full(rc.train, rc.model, manifest, rc.geo_pretrain, resume);
    std::printf("train: val MAE %.2f deg -> %.2f deg over %zu iterations; best %s\n",
                result.init_val_mae, result.final_val_mae, result.log.rows.size(),
                result.checkpoint_path.c_str());
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, int k, const std::string& split,
             const std::string& out, bool overwrite) {
    Manifest manifest = load_manifest(data);
    EvalOptions opt;
    opt.k = k;
    opt.split = split;
    EvalReport report = evaluate_checkpoint(ckpt, manifest, opt);
    std::printf("eval (%s split, %s): mean MAE %.3f deg, median %.3f deg over %zu scenes\n",
                split.c_str(), k > 0 ? cat("K=", k).c_str() : "full K", report.mean,
                report.median, report.per_scene.size());
    if (!out.empty()) {
        prepare_out_dir(out, overwrite);
        write_text((fs::path(out) / "eval.csv").string(), report.csv());
        write_text((fs::path(out) / "eval.json").string(), report.to_json());
        json resolved = {{"ckpt", ckpt}, {"data", data}, {"k", k}, {"split", split}};
        snapshot_config(out, "eval", 0, resolved);
    }
    return 0;
}

int run_ablate(const std::string& kind, const std::string& config_path, const std::string& out,
               bool overwrite) {
    json cfg = read_json_file(config_path);
    prepare_out_dir(out, overwrite);
    snapshot_config(out, cat("ablate-", kind), 0, cfg);
    EvalOptions opt;
    opt.split = cfg.value("split", "test");
    opt.max_scenes = cfg.value("max_scenes", 0);

    if (kind == "encoders") {
        Manifest manifest = load_manifest(cfg.at("data"));
        std::vector<int> k_list = cfg.at("k_list").get<std::vector<int>>();
        AblationTable table = ablate_encoders(
            manifest, cfg.at("checkpoints").at("geo_only"), cfg.at("checkpoints").at("il_only"),
            cfg.at("checkpoints").at("dual"), k_list, opt);
        write_text((fs::path(out) / "encoders.csv").string(), table.csv());
        std::printf("%s", table.csv().c_str());
    } else if (kind == "projection") {
        std::vector<std::pair<std::string, std::string>> regimes;
        for (const auto& [label, path] : cfg.at("checkpoints").items()) {
            regimes.emplace_back(label, path.get<std::string>());
        }
        std::vector<Manifest> storage;
        std::vector<std::pair<std::string, const Manifest*>> buckets;
        for (const auto& [label, path] : cfg.at("buckets").items()) {
            storage.push_back(load_manifest(path.get<std::string>()));
        }
        size_t i = 0;
        for (const auto& [label, path] : cfg.at("buckets").items()) {
            buckets.emplace_back(label, &storage[i++]);
        }
        AblationTable table = ablate_projection(regimes, buckets, opt);
        write_text((fs::path(out) / "projection.csv").string(), table.csv());
        std::printf("%s", table.csv().c_str());
    } else if (kind == "kscale") {
        Manifest manifest = load_manifest(cfg.at("data"));
        std::vector<int> k_list = cfg.at("k_list").get<std::vector<int>>();
        auto curve = k_scaling(manifest, cfg.at("ckpt"), k_list, out, opt);
        for (const auto& [k, mae] : curve) std::printf("K=%d: %.3f deg\n", k, mae);
    } else {
        throw ConfigError(cat("unknown ablation kind '", kind, "'"));
    }
    return 0;
}

int run_infer(const std::string& ckpt, const std::string& scene_dir, const std::string& out,
              int k, bool overwrite) {
    LoadedModel loaded = load_model_checkpoint(ckpt);
    MultiIllumSet set = read_scene_dir(scene_dir);
    Tensor geo = geo_features_for_scene(loaded.model->config(), scene_dir);
    if (k > 0 && k < set.k()) {
        set = subset_images(set, k);
        if (geo.defined()) geo = select_geo_rows(geo, k);
    }
    prepare_out_dir(out, overwrite);
    std::vector<float> normals = loaded.model->infer_full(set, geo);
    write_f32_blob((fs::path(out) / "normals.f32").string(), "NRM1",
                   {static_cast<uint32_t>(set.height), static_cast<uint32_t>(set.width)},
                   normals.data(), normals.size());
    export_normal_png(normals, set.width, set.height,
                      (fs::path(out) / "normals.png").string());
    json resolved = {{"ckpt", ckpt}, {"scene", scene_dir}, {"k", k}};
    snapshot_config(out, "infer", 0, resolved);
    std::printf("wrote %s/normals.png and normals.f32 (%dx%d, K=%d)\n", out.c_str(), set.width,
                set.height, set.k());
    return 0;
}

int run_export(const std::string& normals_path, const std::string& out_png) {
    std::vector<uint32_t> dims;
    std::vector<float> normals = read_f32_blob(normals_path, "NRM1", 2, dims);
    export_normal_png(normals, static_cast<int>(dims[1]), static_cast<int>(dims[0]), out_png);
    std::printf("wrote %s (%ux%u)\n", out_png.c_str(), dims[1], dims[0]);
    return 0;
}

int run_smoke(uint64_t seed, const std::string& out, bool overwrite) {
    prepare_out_dir(out, overwrite);
    SmokeReport report = pipeline_smoke(seed, out);
    std::printf("gen_data: %s\n", report.gen_ok ? "pass" : "FAIL");
    std::printf("pretrain_geo: %s\n", report.pretrain_ok ? "pass" : "FAIL");
    std::printf("train: %s\n", report.train_ok ? "pass" : "FAIL");
    std::printf("eval: %s\n", report.eval_ok ? "pass" : "FAIL");
    std::printf("infer_export: %s\n", report.infer_ok ? "pass" : "FAIL");
    if (!report.all_passed()) {
        std::fprintf(stderr, "smoke failed at stage %s: %s\n", report.failed_stage.c_str(),
                     report.error.c_str());
        return 1;
    }
    std::printf("final loss %.6g, eval MAE %.3f deg, %.1fs\n", report.final_loss,
                report.eval_mae_deg, report.seconds);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"universal photometric stereo: synthetic data, training, evaluation"};
    app.require_subcommand(1);

    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "chatty progress output");

    std::string config_path, out_dir, ckpt, data, scene_dir, split = "test", resume, kind;
    std::string normals_path, out_png;
    uint64_t seed = 1;
    int k = 0;
    bool overwrite = false;

    auto* gen = app.add_subcommand("gen-data", "render a synthetic multi-illumination dataset");
    gen->add_option("--config", config_path, "generation config JSON (defaults if omitted)");
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_option("--seed", seed, "master seed");
    gen->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* pre = app.add_subcommand("pretrain-geo", "pretrain the frozen geometry trunk");
    pre->add_option("--config", config_path, "run config JSON")->required();
    pre->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* train = app.add_subcommand("train", "train the full model");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    eval->add_option("--ckpt", ckpt, "model checkpoint")->required();
    eval->add_option("--data", data, "dataset manifest.json")->required();
    eval->add_option("--k", k, "use only the first K images");
    eval->add_option("--split", split, "dataset split (default test)");
    eval->add_option("--out", out_dir, "write eval.csv / eval.json here");
    eval->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* ablate = app.add_subcommand("ablate", "run an ablation study");
    ablate->add_option("--kind", kind, "encoders | projection | kscale")->required();
    ablate->add_option("--config", config_path, "ablation config JSON")->required();
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* infer = app.add_subcommand("infer", "predict a normal map for one scene");
    infer->add_option("--ckpt", ckpt, "model checkpoint")->required();
    infer->add_option("--scene", scene_dir, "scene directory")->required();
    infer->add_option("--out", out_dir, "output directory")->required();
    infer->add_option("--k", k, "use only the first K images");
    infer->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    auto* exp = app.add_subcommand("export", "convert a normals.f32 file to a PNG visualization");
    exp->add_option("--normals", normals_path, "normals.f32 input")->required();
    exp->add_option("--out", out_png, "output PNG path")->required();

    auto* smoke = app.add_subcommand("smoke", "miniature end-to-end pipeline check");
    smoke->add_option("--seed", seed, "seed");
    smoke->add_option("--out", out_dir, "output directory")->required();
    smoke->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // exit 0 with usage
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage error
    }

    try {
        if (gen->parsed()) return run_gen_data(config_path, out_dir, seed, overwrite, verbose);
        if (pre->parsed()) return run_pretrain(config_path, overwrite);
        if (train->parsed()) return run_train(config_path, resume, overwrite);
        if (eval->parsed()) return run_eval(ckpt, data, k, split, out_dir, overwrite);
        if (ablate->parsed()) return run_ablate(kind, config_path, out_dir, overwrite);
        if (infer->parsed()) return run_infer(ckpt, scene_dir, out_dir, k, overwrite);
        if (exp->parsed()) return run_export(normals_path, out_png);
        if (smoke->parsed()) return run_smoke(seed, out_dir, overwrite);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
