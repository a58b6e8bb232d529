#include "unips/train.hpp"

#include "unips/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace unips {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    if (manifest_path.empty()) throw ConfigError("train: manifest path required");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_scenes < 1) throw ConfigError("train: batch_scenes must be >= 1");
    if (k_min < 1 || k_max < k_min) throw ConfigError("train: bad K range");
    if (p_train < 1) throw ConfigError("train: p_train must be >= 1");
    if (lr <= 0) throw ConfigError("train: learning rate must be positive");
    if (clip_norm <= 0) throw ConfigError("train: clip norm must be positive");
}

std::string TrainLog::csv() const {
    std::string out = "iteration,loss_low,loss_high,lr,grad_norm\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g\n",
                      static_cast<long long>(r.iter), r.loss_low, r.loss_high, r.lr, r.grad_norm);
        out += buf;
    }
    return out;
}

void TrainLog::save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(cat("cannot open ", path, " for writing"));
    f << csv();
}

void TrainLog::save_summary_json(const std::string& path, double init_val_mae,
                                 double final_val_mae) const {
    json j;
    j["iterations"] = rows.size();
    j["wall_seconds"] = wall_seconds;
    j["init_val_mae_deg"] = init_val_mae;
    j["final_val_mae_deg"] = final_val_mae;
    j["val_mae_per_epoch"] = json::array();
    for (const auto& [epoch, mae] : val_mae_per_epoch) {
        j["val_mae_per_epoch"].push_back({{"epoch", epoch}, {"mae_deg", mae}});
    }
    if (!rows.empty()) {
        j["final_loss_low"] = rows.back().loss_low;
        j["final_loss_high"] = rows.back().loss_high;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(cat("cannot open ", path, " for writing"));
    f << j.dump(2) << "\n";
}

std::pair<Tensor, Tensor> two_scale_loss_parts(const Tensor& pred_low, const Tensor& pred_high,
                                               const Tensor& gt) {
    if (pred_low.shape() != gt.shape() || pred_high.shape() != gt.shape()) {
        throw ShapeError(cat("two_scale_loss: shape mismatch low ", shape_str(pred_low.shape()),
                             " high ", shape_str(pred_high.shape()), " gt ",
                             shape_str(gt.shape())));
    }
    const int n = gt.dim(-1);
    const int64_t rows = gt.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0;
        for (int c = 0; c < n; ++c) {
            const double v = gt.ptr()[r * n + c];
            s += v * v;
        }
        if (std::fabs(std::sqrt(s) - 1.0) > 1e-3) {
            throw ContractError(cat("two_scale_loss: ground-truth normal ", r,
                                    " is not unit length (dataset bug)"));
        }
    }
    Tensor d_low = sub(pred_low, gt);
    Tensor d_high = sub(pred_high, gt);
    Tensor loss_low = scale(mean_all(mul(d_low, d_low)), static_cast<float>(n));
    Tensor loss_high = scale(mean_all(mul(d_high, d_high)), static_cast<float>(n));
    return {loss_low, loss_high};
}

Tensor two_scale_loss(const Tensor& pred_low, const Tensor& pred_high, const Tensor& gt) {
    auto [lo, hi] = two_scale_loss_parts(pred_low, pred_high, gt);
    return add(lo, hi);
}

std::vector<int> sample_pixels(const std::vector<uint8_t>& mask, int p, std::mt19937_64& rng) {
    if (p < 1) throw ContractError("sample_pixels: P must be >= 1");
    std::vector<int> in_mask;
    in_mask.reserve(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) in_mask.push_back(static_cast<int>(i));
    }
    if (in_mask.empty()) throw ContractError("sample_pixels: empty mask");
    if (static_cast<int>(in_mask.size()) <= p) {
        if (static_cast<int>(in_mask.size()) < p) {
            std::fprintf(stderr, "[unips] warning: mask has %zu pixels, requested %d; using all\n",
                         in_mask.size(), p);
        }
        return in_mask;
    }
    // partial Fisher-Yates: first p entries are a uniform sample without
    // replacement
    for (int i = 0; i < p; ++i) {
        std::uniform_int_distribution<int> pick(i, static_cast<int>(in_mask.size()) - 1);
        std::swap(in_mask[static_cast<size_t>(i)], in_mask[static_cast<size_t>(pick(rng))]);
    }
    in_mask.resize(static_cast<size_t>(p));
    return in_mask;
}

double validation_mae(const Model& model, const Manifest& manifest, const std::string& split,
                      int cap, int k) {
    auto records = manifest.split(split);
    if (records.empty()) throw ContractError(cat("validation: split '", split, "' is empty"));
    if (cap > 0 && static_cast<int>(records.size()) > cap) {
        records.resize(static_cast<size_t>(cap));
    }
    double total = 0;
    for (const auto* rec : records) {
        MultiIllumSet set = read_scene_dir(manifest.scene_path(*rec));
        Tensor geo = geo_features_for_scene(model.config(), manifest.scene_path(*rec));
        if (k > 0 && k < set.k()) {
            set = subset_images(set, k);
            if (geo.defined()) geo = select_geo_rows(geo, k);
        }
        std::vector<float> pred = model.infer_full(set, geo);
        total += mae_degrees(pred, set.gt_normals, set.mask);
    }
    return total / static_cast<double>(records.size());
}

namespace {

struct SceneCache {
    std::vector<MultiIllumSet> scenes;
    std::vector<std::string> dirs;
    std::vector<Tensor> geo_feats;  // undefined tensors unless precomputed mode
};

SceneCache load_split(const Manifest& manifest, const std::string& split,
                      const ModelConfig& model_config) {
    SceneCache cache;
    for (const auto* rec : manifest.split(split)) {
        cache.scenes.push_back(read_scene_dir(manifest.scene_path(*rec)));
        cache.dirs.push_back(rec->dir);
        cache.geo_feats.push_back(
            geo_features_for_scene(model_config, manifest.scene_path(*rec)));
    }
    if (cache.scenes.empty()) {
        throw ContractError(cat("training: split '", split, "' is empty"));
    }
    return cache;
}

Tensor gather_gt_normals(const MultiIllumSet& set, const std::vector<int>& indices) {
    Tensor gt = make_tensor({static_cast<int>(indices.size()), 3}, false);
    float* p = gt.ptr();
    for (size_t i = 0; i < indices.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            p[i * 3 + c] = set.gt_normals[static_cast<size_t>(indices[i]) * 3 + c];
        }
    }
    return gt;
}

// K distinct image indices, deterministic under the rng
std::vector<int> pick_images(int total, int k, std::mt19937_64& rng) {
    std::vector<int> idx(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<int> pick(i, total - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

MultiIllumSet select_images(const MultiIllumSet& set, const std::vector<int>& image_indices) {
    MultiIllumSet out = set;
    out.images.clear();
    out.rigs.clear();
    for (int i : image_indices) {
        out.images.push_back(set.images[static_cast<size_t>(i)]);
        out.rigs.push_back(set.rigs[static_cast<size_t>(i)]);
    }
    return out;
}

}  // namespace

TrainResult pretrain_geo(const TrainConfig& config, const ModelConfig& model_config,
                         const Manifest& manifest) {
    config.validate();
    model_config.validate();
    fs::create_directories(config.out_dir);
    const auto t_start = std::chrono::steady_clock::now();

    SceneCache train = load_split(manifest, "train", model_config);
    SceneCache val = load_split(manifest, "val", model_config);

    Model model(model_config, derive_seed(config.seed, 0x6d6f64));
    // temporary monocular head, discarded after the trunk is stored
    LinearLayer head(model.params(), "pretrain.head", model_config.geo_dim, 3);

    const int ps = model_config.patch_size;
    const int gh = manifest.height / ps, gw = manifest.width / ps;

    // per-scene token-level targets: cell-averaged in-mask normals
    struct TokenTargets {
        std::vector<int> valid_tokens;
        std::vector<float> normals;  // 3 per valid token
    };
    auto build_targets = [&](const MultiIllumSet& set) {
        TokenTargets t;
        for (int ty = 0; ty < gh; ++ty) {
            for (int tx = 0; tx < gw; ++tx) {
                double sx = 0, sy = 0, sz = 0;
                int covered = 0;
                for (int dy = 0; dy < ps; ++dy) {
                    for (int dx = 0; dx < ps; ++dx) {
                        const int px = (ty * ps + dy) * set.width + tx * ps + dx;
                        if (!set.mask[static_cast<size_t>(px)]) continue;
                        sx += set.gt_normals[static_cast<size_t>(px) * 3];
                        sy += set.gt_normals[static_cast<size_t>(px) * 3 + 1];
                        sz += set.gt_normals[static_cast<size_t>(px) * 3 + 2];
                        ++covered;
                    }
                }
                const double norm = std::sqrt(sx * sx + sy * sy + sz * sz);
                if (covered * 2 >= ps * ps && norm > 0.2) {
                    t.valid_tokens.push_back(ty * gw + tx);
                    t.normals.push_back(static_cast<float>(sx / norm));
                    t.normals.push_back(static_cast<float>(sy / norm));
                    t.normals.push_back(static_cast<float>(sz / norm));
                }
            }
        }
        return t;
    };
    std::vector<TokenTargets> targets;
    targets.reserve(train.scenes.size());
    for (const auto& s : train.scenes) targets.push_back(build_targets(s));

    auto token_forward = [&](const MultiIllumSet& set, int image_index,
                             const TokenTargets& tt) -> std::pair<Tensor, Tensor> {
        Tensor img = make_tensor({1, set.height, set.width, 3}, false);
        std::copy(set.images[static_cast<size_t>(image_index)].begin(),
                  set.images[static_cast<size_t>(image_index)].end(), img.ptr());
        Tensor tokens = model.geo_trunk_tokens(Model::standardize_per_image(img));
        Tensor pred = l2_normalize_lastdim(head.forward(tokens));  // [1,T,3]
        Tensor picked = reshape(gather_dim1(pred, tt.valid_tokens),
                                {static_cast<int>(tt.valid_tokens.size()), 3});
        Tensor gt = Tensor::from_data({static_cast<int>(tt.valid_tokens.size()), 3}, tt.normals);
        return {picked, gt};
    };

    auto token_val_mae = [&]() {
        NoGradGuard no_grad;
        double total = 0;
        int counted = 0;
        for (const auto& s : val.scenes) {
            TokenTargets tt = build_targets(s);
            if (tt.valid_tokens.empty()) continue;
            auto [pred, gt] = token_forward(s, 0, tt);
            std::vector<uint8_t> ones(tt.valid_tokens.size(), 1);
            total += mae_degrees(pred.data(), gt.data(), ones);
            ++counted;
        }
        return counted ? total / counted : 0.0;
    };

    AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr;
    opt_cfg.weight_decay = config.weight_decay;
    AdamW opt(model.params(), opt_cfg);

    const int ipe = config.iters_per_epoch > 0
                        ? config.iters_per_epoch
                        : static_cast<int>((train.scenes.size() + config.batch_scenes - 1) /
                                           config.batch_scenes);
    LrSchedule sched{ipe, config.warmup_epochs * ipe, config.decay_every_epochs,
                     config.decay_factor};

    TrainResult result;
    result.init_val_mae = token_val_mae();

    std::mt19937_64 rng(derive_seed(config.seed, 0x707265));
    int64_t iter = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        for (int step = 0; step < ipe; ++step, ++iter) {
            Tape::current().clear();
            model.params().zero_grads();
            Tensor loss;
            for (int b = 0; b < config.batch_scenes; ++b) {
                const int si = std::uniform_int_distribution<int>(
                    0, static_cast<int>(train.scenes.size()) - 1)(rng);
                const auto& scene = train.scenes[static_cast<size_t>(si)];
                if (targets[static_cast<size_t>(si)].valid_tokens.empty()) continue;
                const int ki =
                    std::uniform_int_distribution<int>(0, scene.k() - 1)(rng);
                auto [pred, gt] = token_forward(scene, ki, targets[static_cast<size_t>(si)]);
                Tensor d = sub(pred, gt);
                Tensor part = scale(mean_all(mul(d, d)), 3.0f);
                loss = loss.defined() ? add(loss, part) : part;
            }
            if (!loss.defined()) continue;
            loss = scale(loss, 1.0f / config.batch_scenes);
            if (!std::isfinite(loss.scalar())) throw Error("pretrain: non-finite loss");
            backward(loss);
            const double gnorm = opt.clip_grad_norm(config.clip_norm);
            const float lr_now = sched.lr_at(iter, config.lr);
            opt.step(lr_now);
            result.log.rows.push_back({iter, loss.scalar(), 0.0f, lr_now,
                                       static_cast<float>(gnorm)});
            Tape::current().clear();
        }
        result.log.val_mae_per_epoch.emplace_back(epoch, token_val_mae());
    }
    result.final_val_mae = result.log.val_mae_per_epoch.back().second;
    result.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    result.checkpoint_path = (fs::path(config.out_dir) / "geo_pretrain.bin").string();
    save_model_checkpoint(result.checkpoint_path, model, "geo_pretrain");
    result.log.save_csv((fs::path(config.out_dir) / "pretrain_log.csv").string());
    result.log.save_summary_json((fs::path(config.out_dir) / "pretrain_summary.json").string(),
                                 result.init_val_mae, result.final_val_mae);
    return result;
}

TrainResult train_full(const TrainConfig& config, const ModelConfig& model_config,
                       const Manifest& manifest, const std::string& geo_pretrain_ckpt,
                       const std::string& resume_ckpt) {
    config.validate();
    model_config.validate();
    fs::create_directories(config.out_dir);
    const auto t_start = std::chrono::steady_clock::now();

    SceneCache train = load_split(manifest, "train", model_config);

    auto model_ptr = std::make_unique<Model>(model_config, derive_seed(config.seed, 0x6d6f64));
    if (!resume_ckpt.empty()) {
        LoadedModel loaded = load_model_checkpoint(resume_ckpt, model_config);
        model_ptr = std::move(loaded.model);
    }
    Model& model = *model_ptr;

    const bool needs_geo = model_config.branch_mode != BranchMode::kIlOnly &&
                           model_config.geo_backbone == GeoBackboneMode::kInternalFrozen;
    if (needs_geo && resume_ckpt.empty()) {
        if (geo_pretrain_ckpt.empty()) {
            throw ConfigError(
                "train: geometry branch enabled but no pretrained backbone checkpoint given");
        }
        Checkpoint ckpt = load_checkpoint(geo_pretrain_ckpt);
        apply_checkpoint_prefix(ckpt, model.params(), "geo.backbone.");
    }
    // the backbone stays frozen in every mode; when unused it is inert
    model.freeze_geo_backbone();
    const uint64_t backbone_hash_before = model.geo_backbone_hash();

    // frozen trunk tap tokens are lighting-independent per image; cache
    // them per scene unless that would not fit in memory
    std::vector<std::vector<Tensor>> tap_cache;
    const bool use_geo_branch = model_config.branch_mode != BranchMode::kIlOnly &&
                                model_config.geo_backbone == GeoBackboneMode::kInternalFrozen;
    if (use_geo_branch) {
        const auto& first = train.scenes[0];
        const int tokens = (first.width / model_config.patch_size) *
                           (first.height / model_config.patch_size);
        const double bytes = static_cast<double>(train.scenes.size()) * first.k() *
                             static_cast<double>(model_config.tap_layers_geo.size()) * tokens *
                             model_config.geo_dim * 4.0;
        if (bytes < 2.2e9) {
            NoGradGuard no_grad;
            tap_cache.reserve(train.scenes.size());
            for (const auto& scene : train.scenes) {
                Tensor raw = make_tensor({scene.k(), scene.height, scene.width, 3}, false);
                const size_t plane = static_cast<size_t>(scene.height) * scene.width * 3;
                for (int ki = 0; ki < scene.k(); ++ki) {
                    std::copy(scene.images[static_cast<size_t>(ki)].begin(),
                              scene.images[static_cast<size_t>(ki)].end(),
                              raw.ptr() + static_cast<size_t>(ki) * plane);
                }
                tap_cache.push_back(model.geo_trunk_taps(raw));
            }
        } else {
            std::fprintf(stderr,
                         "[unips] geo tap cache would need %.1f GB; recomputing per iteration\n",
                         bytes / 1e9);
        }
    }

    AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr;
    opt_cfg.weight_decay = config.weight_decay;
    AdamW opt(model.params(), opt_cfg);

    const int ipe = config.iters_per_epoch > 0
                        ? config.iters_per_epoch
                        : static_cast<int>((train.scenes.size() + config.batch_scenes - 1) /
                                           config.batch_scenes);
    LrSchedule sched{ipe, config.warmup_epochs * ipe, config.decay_every_epochs,
                     config.decay_factor};

    TrainResult result;
    result.init_val_mae =
        validation_mae(model, manifest, "val", config.val_scene_cap, config.val_k);

    const std::string best_path = (fs::path(config.out_dir) / "best.bin").string();
    double best_val = 1e300;

    std::mt19937_64 rng(derive_seed(config.seed, 0x747261));
    int64_t iter = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        for (int step = 0; step < ipe; ++step, ++iter) {
            Tape::current().clear();
            model.params().zero_grads();

            const int k_hi = std::min(config.k_max, train.scenes[0].k());
            const int k_lo = std::min(config.k_min, k_hi);
            const int k = std::uniform_int_distribution<int>(k_lo, k_hi)(rng);

            Tensor loss_low_sum, loss_high_sum;
            std::vector<std::string> batch_dirs;
            for (int b = 0; b < config.batch_scenes; ++b) {
                const int si = std::uniform_int_distribution<int>(
                    0, static_cast<int>(train.scenes.size()) - 1)(rng);
                const auto& scene = train.scenes[static_cast<size_t>(si)];
                batch_dirs.push_back(train.dirs[static_cast<size_t>(si)]);

                const std::vector<int> image_pick = pick_images(scene.k(), k, rng);
                MultiIllumSet sub = select_images(scene, image_pick);
                std::vector<int> pixels = sample_pixels(sub.mask, config.p_train, rng);

                Tensor images = Model::normalize_images(sub.images, sub.height, sub.width);
                FeatureMaps feats;
                if (!tap_cache.empty()) {
                    std::vector<Tensor> taps;
                    for (const Tensor& full : tap_cache[static_cast<size_t>(si)]) {
                        taps.push_back(select_geo_rows(full, image_pick));
                    }
                    feats = model.encode_with_geo_taps(images, taps);
                } else {
                    Tensor geo_sub;
                    if (train.geo_feats[static_cast<size_t>(si)].defined()) {
                        geo_sub = select_geo_rows(train.geo_feats[static_cast<size_t>(si)],
                                                  image_pick);
                    }
                    feats = model.encode(images, geo_sub);
                }
                DecodedNormals dec = model.decode(feats, images, pixels);
                Tensor gt = gather_gt_normals(sub, pixels);
                auto [lo, hi] = two_scale_loss_parts(dec.low, dec.high, gt);
                loss_low_sum = loss_low_sum.defined() ? add(loss_low_sum, lo) : lo;
                loss_high_sum = loss_high_sum.defined() ? add(loss_high_sum, hi) : hi;
            }
            const float inv_b = 1.0f / config.batch_scenes;
            Tensor loss_low = scale(loss_low_sum, inv_b);
            Tensor loss_high = scale(loss_high_sum, inv_b);
            Tensor loss = add(loss_low, loss_high);
            if (!std::isfinite(loss.scalar())) {
                std::string dirs;
                for (const auto& d : batch_dirs) dirs += d + " ";
                throw Error(cat("train: non-finite loss at iteration ", iter, "; batch scenes: ",
                                dirs));
            }
            backward(loss);
            const double gnorm = opt.clip_grad_norm(config.clip_norm);
            const float lr_now = sched.lr_at(iter, config.lr);
            opt.step(lr_now);
            result.log.rows.push_back({iter, loss_low.scalar(), loss_high.scalar(), lr_now,
                                       static_cast<float>(gnorm)});
            Tape::current().clear();
        }

        const double val_mae =
            validation_mae(model, manifest, "val", config.val_scene_cap, config.val_k);
        result.log.val_mae_per_epoch.emplace_back(epoch, val_mae);
        if (val_mae < best_val) {
            best_val = val_mae;
            save_model_checkpoint(best_path, model);
        }
        if (config.checkpoint_every_epochs > 0 && epoch % config.checkpoint_every_epochs == 0) {
            char name[48];
            std::snprintf(name, sizeof(name), "ckpt_epoch_%03d.bin", epoch);
            save_model_checkpoint((fs::path(config.out_dir) / name).string(), model);
        }
    }

    if (model.geo_backbone_hash() != backbone_hash_before) {
        throw Error("train: frozen geometry backbone changed during training");
    }

    result.final_val_mae = best_val;
    result.checkpoint_path = best_path;
    result.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.log.save_csv((fs::path(config.out_dir) / "train_log.csv").string());
    result.log.save_summary_json((fs::path(config.out_dir) / "train_summary.json").string(),
                                 result.init_val_mae, result.final_val_mae);
    return result;
}

}  // namespace unips
