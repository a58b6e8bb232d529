#include "unips/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "unips/eval.hpp"
#include "unips/image_io.hpp"

namespace unips {

namespace fs = std::filesystem;
using nlohmann::json;

std::string SmokeReport::to_json() const {
    json j;
    j["stages"] = {{"gen_data", gen_ok},
                   {"pretrain_geo", pretrain_ok},
                   {"train", train_ok},
                   {"eval", eval_ok},
                   {"infer_export", infer_ok}};
    j["all_passed"] = all_passed();
    j["failed_stage"] = failed_stage;
    j["error"] = error;
    j["final_loss"] = final_loss;
    j["eval_mae_deg"] = eval_mae_deg;
    j["seconds"] = seconds;
    return j.dump(2) + "\n";
}

ModelConfig smoke_model_config() {
    ModelConfig c;
    c.patch_size = 4;
    c.il_layers = 2;
    c.il_dim = 32;
    c.il_heads = 4;
    c.tap_layers_il = {0, 1};
    c.geo_layers = 2;
    c.geo_dim = 32;
    c.geo_heads = 4;
    c.tap_layers_geo = {0, 1};
    c.branch_channels = 16;
    c.dec_light_dim = 24;
    c.dec_light_blocks = 2;
    c.dec_light_heads = 4;
    c.dec_pma_dim = 36;
    c.dec_pma_heads = 4;
    c.dec_pixel_blocks = 1;
    c.dec_pixel_heads = 3;  // pixel width 39
    c.train_pixel_samples = 64;
    c.infer_pixel_samples = 128;
    return c;
}

GenConfig smoke_gen_config() {
    GenConfig g;
    g.image_width = g.image_height = 16;
    g.images_per_scene = 4;
    g.max_objects = 2;
    g.train_scenes = 3;
    g.val_scenes = 1;
    g.test_scenes = 1;
    g.ground_plane_prob = 0.0;
    return g;
}

SmokeReport pipeline_smoke(uint64_t seed, const std::string& out_dir) {
    SmokeReport report;
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out_dir);
    const fs::path base(out_dir);

    Manifest manifest;
    try {
        manifest = gen_dataset(smoke_gen_config(), (base / "data").string(), seed);
        report.gen_ok = true;
    } catch (const std::exception& e) {
        report.failed_stage = "gen_data";
        report.error = e.what();
        return report;
    }

    const ModelConfig model_cfg = smoke_model_config();
    TrainConfig pre_cfg;
    pre_cfg.manifest_path = (base / "data" / "manifest.json").string();
    pre_cfg.out_dir = (base / "pretrain").string();
    pre_cfg.epochs = 10;
    pre_cfg.batch_scenes = 2;
    pre_cfg.lr = 1e-3f;
    pre_cfg.decay_every_epochs = 5;
    pre_cfg.seed = derive_seed(seed, 1);
    pre_cfg.val_scene_cap = 1;

    std::string geo_ckpt;
    try {
        TrainResult pre = pretrain_geo(pre_cfg, model_cfg, manifest);
        geo_ckpt = pre.checkpoint_path;
        report.pretrain_ok = true;
    } catch (const std::exception& e) {
        report.failed_stage = "pretrain_geo";
        report.error = e.what();
        return report;
    }

    TrainConfig train_cfg;
    train_cfg.manifest_path = pre_cfg.manifest_path;
    train_cfg.out_dir = (base / "train").string();
    train_cfg.epochs = 25;  // 2 iterations/epoch over 3 scenes -> 50 total
    train_cfg.batch_scenes = 2;
    train_cfg.k_min = 2;
    train_cfg.k_max = 3;
    train_cfg.p_train = 64;
    train_cfg.lr = 1e-3f;
    train_cfg.decay_every_epochs = 10;
    train_cfg.seed = derive_seed(seed, 2);
    train_cfg.checkpoint_every_epochs = 25;
    train_cfg.val_scene_cap = 1;

    std::string model_ckpt;
    try {
        TrainResult tr = train_full(train_cfg, model_cfg, manifest, geo_ckpt);
        model_ckpt = tr.checkpoint_path;
        report.final_loss = tr.log.rows.empty()
                                ? 0.0
                                : tr.log.rows.back().loss_low + tr.log.rows.back().loss_high;
        report.train_log_csv = tr.log.csv();
        for (const auto& row : tr.log.rows) {
            if (!std::isfinite(row.loss_low) || !std::isfinite(row.loss_high)) {
                throw Error("smoke: non-finite loss logged");
            }
        }
        report.train_ok = true;
    } catch (const std::exception& e) {
        report.failed_stage = "train";
        report.error = e.what();
        return report;
    }

    try {
        EvalOptions opt;
        opt.split = "test";
        EvalReport er = evaluate_checkpoint(model_ckpt, manifest, opt);
        report.eval_mae_deg = er.mean;
        report.eval_csv = er.csv();
        if (!std::isfinite(er.mean)) throw Error("smoke: non-finite eval MAE");
        report.eval_ok = true;
    } catch (const std::exception& e) {
        report.failed_stage = "eval";
        report.error = e.what();
        return report;
    }

    try {
        LoadedModel loaded = load_model_checkpoint(model_ckpt);
        const auto* rec = manifest.split("test").at(0);
        MultiIllumSet set = read_scene_dir(manifest.scene_path(*rec));
        std::vector<float> normals = loaded.model->infer_full(set);
        for (size_t i = 0; i < normals.size() / 3; ++i) {
            const double len = std::sqrt(static_cast<double>(normals[i * 3]) * normals[i * 3] +
                                         static_cast<double>(normals[i * 3 + 1]) * normals[i * 3 + 1] +
                                         static_cast<double>(normals[i * 3 + 2]) * normals[i * 3 + 2]);
            if (std::fabs(len - 1.0) > 1e-5) throw Error("smoke: non-unit inferred normal");
        }
        const fs::path infer_dir = base / "infer";
        fs::create_directories(infer_dir);
        write_f32_blob((infer_dir / "normals.f32").string(), "NRM1",
                       {static_cast<uint32_t>(set.height), static_cast<uint32_t>(set.width)},
                       normals.data(), normals.size());
        export_normal_png(normals, set.width, set.height, (infer_dir / "normals.png").string());
        report.infer_ok = true;
    } catch (const std::exception& e) {
        report.failed_stage = "infer_export";
        report.error = e.what();
        return report;
    }

    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream f((base / "smoke_report.json").string(), std::ios::binary);
    f << report.to_json();
    return report;
}

}  // namespace unips
