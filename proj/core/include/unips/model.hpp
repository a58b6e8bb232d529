#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "unips/checkpoint.hpp"
#include "unips/nn.hpp"
#include "unips/render.hpp"

namespace unips {

enum class GeoBackboneMode { kInternalFrozen, kPrecomputedFiles };
enum class BranchMode { kDual, kIlOnly, kGeoOnly };

const char* branch_mode_name(BranchMode m);

// Network hyperparameters. desk() is the scale everything in-repo runs
// at; paper_scale() records the published configuration so the scale gap
// is visible in one place (12-layer illumination encoder, 128-channel
// branches, 2048/10000 pixel samples, 256/384 decoder widths).
struct ModelConfig {
    int patch_size = 4;

    int il_layers = 4;  // alternating frame / light-axis attention blocks
    int il_dim = 64;
    int il_heads = 4;
    int il_mlp_ratio = 2;
    std::vector<int> tap_layers_il = {1, 2, 3};

    GeoBackboneMode geo_backbone = GeoBackboneMode::kInternalFrozen;
    int geo_layers = 4;  // frame attention only: strictly per-image
    int geo_dim = 64;
    int geo_heads = 4;
    int geo_mlp_ratio = 2;
    std::vector<int> tap_layers_geo = {1, 2, 3};
    int precomputed_geo_channels = 32;  // C in geo_feat.f32 files

    int branch_channels = 32;
    BranchMode branch_mode = BranchMode::kDual;

    int dec_light_dim = 48;
    int dec_light_blocks = 5;
    int dec_light_heads = 4;
    int dec_pma_dim = 72;
    int dec_pma_heads = 4;
    int dec_pixel_blocks = 2;
    int dec_pixel_heads = 3;  // attends at dec_pma_dim + 3

    int train_pixel_samples = 256;
    int infer_pixel_samples = 1024;

    void validate() const;
    std::string to_json() const;  // canonical: sorted keys
    static ModelConfig from_json(const std::string& text);
    static ModelConfig from_json(const std::string& text, const ModelConfig& base);
    uint64_t hash() const;

    static ModelConfig desk() { return {}; }
    static ModelConfig paper_scale();
    int fused_channels() const { return 2 * branch_channels; }
};

// Feature maps at half resolution: geometry channels first, then
// illumination channels.
struct FeatureMaps {
    Tensor grid;  // [K, H/2, W/2, 2*branch_channels]
};

struct DecodedNormals {
    Tensor low;   // [P,3], unit rows
    Tensor high;  // [P,3], unit rows (the final answer)
};

class Model {
public:
    Model(ModelConfig config, uint64_t init_seed);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return *params_; }
    const ParamStore& params() const { return *params_; }

    // Joint max-val normalization: one scalar over the whole K-image set.
    // An all-zero set divides by the epsilon guard and warns on stderr.
    static Tensor normalize_images(const std::vector<std::vector<float>>& images, int height,
                                   int width);

    // Branch encoders. Inputs are the normalized [K,H,W,3] stack; the
    // geometry branch re-standardizes per image internally, so its output
    // does not depend on the global scale either.
    Tensor encode_il(const Tensor& images) const;
    Tensor encode_geo(const Tensor& images, const Tensor& geo_precomputed = Tensor()) const;

    // Channel-wise concatenation (geometry first); branch gating per
    // config.branch_mode zeroes the disabled branch.
    FeatureMaps encode(const Tensor& images, const Tensor& geo_precomputed = Tensor()) const;

    // Normal regression at `pixel_indices` (row-major full-resolution
    // indices). `pixels` is the same normalized image stack the encoder
    // consumed.
    DecodedNormals decode(const FeatureMaps& features, const Tensor& pixels,
                          const std::vector<int>& pixel_indices) const;

    // Full-image inference: encodes once, decodes row-major chunks of at
    // most config.infer_pixel_samples pixels (no pixel decoded twice),
    // scatters the high-scale normals into an H*W*3 map.
    std::vector<float> infer_full(const MultiIllumSet& set,
                                  const Tensor& geo_precomputed = Tensor()) const;

    // Geometry trunk forward for monocular pretraining: standardized
    // single image -> final trunk tokens [1, T, geo_dim].
    Tensor geo_trunk_tokens(const Tensor& image) const;

    // Frozen-trunk tap tokens for a raw [K,H,W,3] stack; training caches
    // these per scene since the backbone never changes.
    std::vector<Tensor> geo_trunk_taps(const Tensor& images_raw) const;
    // Learnable fusion head applied to (cached) tap tokens.
    Tensor geo_head_from_taps(const std::vector<Tensor>& taps, int height, int width) const;
    // encode() with the geometry branch fed from cached tap tokens.
    FeatureMaps encode_with_geo_taps(const Tensor& images, const std::vector<Tensor>& taps) const;

    void freeze_geo_backbone();
    bool geo_backbone_frozen() const { return geo_frozen_; }
    uint64_t geo_backbone_hash() const;

    // Per-image mean/std standardization (the tokenizer-normalization
    // stand-in for the geometry branch).
    static Tensor standardize_per_image(const Tensor& images);

private:
    ModelConfig config_;
    std::unique_ptr<ParamStore> params_;
    bool geo_frozen_ = false;

    // illumination branch
    PatchEmbedLayer il_embed_;
    std::vector<TransformerBlock> il_blocks_;
    FusionHead il_head_;
    // geometry branch
    PatchEmbedLayer geo_embed_;
    std::vector<TransformerBlock> geo_blocks_;
    FusionHead geo_head_;
    LinearLayer geo_pre_proj_;  // precomputed-features mode
    // decoder, low scale
    LinearLayer low_in_;
    std::vector<TransformerBlock> low_blocks_;
    LinearLayer low_pma_in_;
    TransformerBlock low_pma_block_;
    PmaLayer low_pma_;
    std::vector<TransformerBlock> low_pix_blocks_;
    LinearLayer low_mlp1_, low_mlp2_;
    // decoder, high scale
    LinearLayer embed1_, embed2_;
    LayerNormLayer embed_ln1_, embed_ln2_;
    LinearLayer high_in_;
    std::vector<TransformerBlock> high_blocks_;
    LinearLayer high_pma_in_;
    PmaLayer high_pma_;
    std::vector<TransformerBlock> high_pix_blocks_;
    LinearLayer final1_, final2_, final3_;

    Tensor run_trunk(const Tensor& tokens, const std::vector<TransformerBlock>& blocks,
                     bool alternate_light_axis, const std::vector<int>& taps,
                     std::vector<Tensor>& tap_outputs) const;
};

// Checkpoint helpers: the container's meta JSON carries the model config,
// its hash, and the frozen-backbone fingerprint.
void save_model_checkpoint(const std::string& path, const Model& model,
                           const std::string& kind = "model");

struct LoadedModel {
    std::unique_ptr<Model> model;
    std::string kind;
};

// Rebuilds the model from the embedded config and applies the weights.
// If `expect_config` is given and its hash differs, throws unless `force`.
LoadedModel load_model_checkpoint(const std::string& path,
                                  const std::optional<ModelConfig>& expect_config = std::nullopt,
                                  bool force = false);

// Copies `prefix`-named parameters from a checkpoint into the store
// (geometry-backbone transfer from the pretraining run).
void apply_checkpoint_prefix(const Checkpoint& ckpt, ParamStore& store,
                             const std::string& prefix);

// Per-scene precomputed geometry features: magic "GEOF", u32 K, H', W', C.
Tensor load_geo_features(const std::string& path);
void save_geo_features(const std::string& path, const Tensor& grid);

// Loads scene_dir/geo_feat.f32 when the config calls for precomputed
// features and the geometry branch is active; undefined tensor otherwise.
Tensor geo_features_for_scene(const ModelConfig& config, const std::string& scene_dir);

// Leading-axis subsets of a [K,...] feature grid (no gradient tracking).
Tensor select_geo_rows(const Tensor& grid, int first_k);
Tensor select_geo_rows(const Tensor& grid, const std::vector<int>& rows);

}  // namespace unips
