#pragma once

#include <random>
#include <string>
#include <vector>

#include "unips/dataset.hpp"
#include "unips/model.hpp"
#include "unips/optim.hpp"

namespace unips {

struct TrainConfig {
    std::string manifest_path;
    std::string out_dir;
    int epochs = 8;
    int batch_scenes = 2;
    int k_min = 3, k_max = 6;      // images drawn per scene each iteration
    int p_train = 256;             // sampled pixels per scene
    float lr = 1e-4f;              // published default; desk configs override
    float weight_decay = 0.05f;
    float decay_factor = 0.8f;
    int decay_every_epochs = 10;   // desk runs compress this proportionally
    int warmup_epochs = 1;
    double clip_norm = 1.0;
    uint64_t seed = 1;
    int checkpoint_every_epochs = 2;
    int iters_per_epoch = 0;       // 0: ceil(train scenes / batch_scenes)
    int val_scene_cap = 10;        // val MAE over at most this many scenes
    int val_k = 0;                 // 0: each scene's full K

    void validate() const;
};

struct TrainLogRow {
    int64_t iter = 0;
    float loss_low = 0, loss_high = 0, lr = 0, grad_norm = 0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    std::vector<std::pair<int, double>> val_mae_per_epoch;  // (epoch, degrees)
    double wall_seconds = 0;

    std::string csv() const;  // iteration, loss_low, loss_high, lr, grad_norm
    void save_csv(const std::string& path) const;
    void save_summary_json(const std::string& path, double init_val_mae,
                           double final_val_mae) const;
};

// Sum of per-scale mean squared normal errors:
//   mean_p |low - gt|^2 + mean_p |high - gt|^2.
// gt rows must be unit vectors (dataset contract).
Tensor two_scale_loss(const Tensor& pred_low, const Tensor& pred_high, const Tensor& gt);
std::pair<Tensor, Tensor> two_scale_loss_parts(const Tensor& pred_low, const Tensor& pred_high,
                                               const Tensor& gt);

// P distinct in-mask pixel indices (row-major), uniform without
// replacement; warns and returns all in-mask pixels when fewer than P.
std::vector<int> sample_pixels(const std::vector<uint8_t>& mask, int p, std::mt19937_64& rng);

struct TrainResult {
    std::string checkpoint_path;   // best-val checkpoint
    TrainLog log;
    double init_val_mae = 0;       // untrained model on the val split
    double final_val_mae = 0;      // best value reached
};

// Monocular normal-regression pretraining of the geometry trunk: a
// temporary per-token head is trained jointly and discarded; the saved
// checkpoint (kind "geo_pretrain") carries the trunk weights for reuse.
TrainResult pretrain_geo(const TrainConfig& config, const ModelConfig& model_config,
                         const Manifest& manifest);

// Full training per the sampling regime: batches of scenes, K drawn from
// [k_min, k_max], P sampled in-mask pixels, two-scale loss, AdamW with
// warmup + step decay, gradient clipping, per-epoch validation.
// `geo_pretrain_ckpt` supplies the frozen trunk (required for branch
// modes that use the geometry branch with an internal backbone).
TrainResult train_full(const TrainConfig& config, const ModelConfig& model_config,
                       const Manifest& manifest, const std::string& geo_pretrain_ckpt,
                       const std::string& resume_ckpt = "");

// Validation MAE via full-image inference over at most `cap` scenes.
double validation_mae(const Model& model, const Manifest& manifest, const std::string& split,
                      int cap, int k);

}  // namespace unips
