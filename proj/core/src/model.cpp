#include "unips/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>

#include "unips/checkpoint.hpp"
#include "unips/image_io.hpp"

namespace unips {

using nlohmann::json;

const char* branch_mode_name(BranchMode m) {
    switch (m) {
        case BranchMode::kDual: return "dual";
        case BranchMode::kIlOnly: return "il_only";
        case BranchMode::kGeoOnly: return "geo_only";
    }
    return "unknown";
}

namespace {

BranchMode branch_mode_from_name(const std::string& s) {
    if (s == "dual") return BranchMode::kDual;
    if (s == "il_only") return BranchMode::kIlOnly;
    if (s == "geo_only") return BranchMode::kGeoOnly;
    throw ConfigError(cat("unknown branch mode '", s, "'"));
}

void check_taps(const std::vector<int>& taps, int depth, const char* name) {
    if (taps.empty()) throw ConfigError(cat(name, ": no tap layers"));
    int prev = -1;
    for (int t : taps) {
        if (t <= prev || t < 0 || t >= depth) {
            throw ConfigError(cat(name, ": tap layers must be strictly increasing within [0,",
                                  depth, ")"));
        }
        prev = t;
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (patch_size < 1) throw ConfigError("model: patch_size must be >= 1");
    if (il_dim % il_heads != 0) throw ConfigError("model: il_dim not divisible by il_heads");
    if (geo_dim % geo_heads != 0) throw ConfigError("model: geo_dim not divisible by geo_heads");
    if (dec_light_dim % dec_light_heads != 0) {
        throw ConfigError("model: dec_light_dim not divisible by dec_light_heads");
    }
    if (dec_pma_dim % dec_pma_heads != 0) {
        throw ConfigError("model: dec_pma_dim not divisible by dec_pma_heads");
    }
    if ((dec_pma_dim + 3) % dec_pixel_heads != 0) {
        throw ConfigError(cat("model: pixel attention width ", dec_pma_dim + 3,
                              " not divisible by dec_pixel_heads ", dec_pixel_heads));
    }
    check_taps(tap_layers_il, il_layers, "il branch");
    check_taps(tap_layers_geo, geo_layers, "geo branch");
    if (branch_channels < 1) throw ConfigError("model: branch_channels must be >= 1");
    if (train_pixel_samples < 1 || infer_pixel_samples < 1) {
        throw ConfigError("model: pixel sample counts must be >= 1");
    }
    if (dec_light_blocks < 1 || dec_pixel_blocks < 1) {
        throw ConfigError("model: decoder needs at least one block per stage");
    }
}

ModelConfig ModelConfig::paper_scale() {
    ModelConfig c;
    c.patch_size = 14;
    c.il_layers = 12;
    c.il_dim = 768;
    c.il_heads = 12;
    c.il_mlp_ratio = 4;
    c.tap_layers_il = {2, 5, 8, 11};
    c.geo_layers = 24;
    c.geo_dim = 1024;
    c.geo_heads = 16;
    c.geo_mlp_ratio = 4;
    c.tap_layers_geo = {4, 11, 17, 23};
    c.branch_channels = 128;
    c.dec_light_dim = 256;
    c.dec_light_blocks = 5;
    c.dec_light_heads = 8;
    c.dec_pma_dim = 384;
    c.dec_pma_heads = 8;
    c.dec_pixel_blocks = 2;
    c.dec_pixel_heads = 3;
    c.train_pixel_samples = 2048;
    c.infer_pixel_samples = 10000;
    return c;
}

std::string ModelConfig::to_json() const {
    json j;
    j["patch_size"] = patch_size;
    j["il_layers"] = il_layers;
    j["il_dim"] = il_dim;
    j["il_heads"] = il_heads;
    j["il_mlp_ratio"] = il_mlp_ratio;
    j["tap_layers_il"] = tap_layers_il;
    j["geo_backbone"] = geo_backbone == GeoBackboneMode::kInternalFrozen ? "internal_frozen"
                                                                         : "precomputed_files";
    j["geo_layers"] = geo_layers;
    j["geo_dim"] = geo_dim;
    j["geo_heads"] = geo_heads;
    j["geo_mlp_ratio"] = geo_mlp_ratio;
    j["tap_layers_geo"] = tap_layers_geo;
    j["precomputed_geo_channels"] = precomputed_geo_channels;
    j["branch_channels"] = branch_channels;
    j["branch_mode"] = branch_mode_name(branch_mode);
    j["dec_light_dim"] = dec_light_dim;
    j["dec_light_blocks"] = dec_light_blocks;
    j["dec_light_heads"] = dec_light_heads;
    j["dec_pma_dim"] = dec_pma_dim;
    j["dec_pma_heads"] = dec_pma_heads;
    j["dec_pixel_blocks"] = dec_pixel_blocks;
    j["dec_pixel_heads"] = dec_pixel_heads;
    j["train_pixel_samples"] = train_pixel_samples;
    j["infer_pixel_samples"] = infer_pixel_samples;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    return from_json(text, ModelConfig());
}

ModelConfig ModelConfig::from_json(const std::string& text, const ModelConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(cat("model config: parse error: ", e.what()));
    }
    ModelConfig c = base;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("patch_size", c.patch_size);
    get("il_layers", c.il_layers);
    get("il_dim", c.il_dim);
    get("il_heads", c.il_heads);
    get("il_mlp_ratio", c.il_mlp_ratio);
    get("tap_layers_il", c.tap_layers_il);
    get("geo_layers", c.geo_layers);
    get("geo_dim", c.geo_dim);
    get("geo_heads", c.geo_heads);
    get("geo_mlp_ratio", c.geo_mlp_ratio);
    get("tap_layers_geo", c.tap_layers_geo);
    get("precomputed_geo_channels", c.precomputed_geo_channels);
    get("branch_channels", c.branch_channels);
    get("dec_light_dim", c.dec_light_dim);
    get("dec_light_blocks", c.dec_light_blocks);
    get("dec_light_heads", c.dec_light_heads);
    get("dec_pma_dim", c.dec_pma_dim);
    get("dec_pma_heads", c.dec_pma_heads);
    get("dec_pixel_blocks", c.dec_pixel_blocks);
    get("dec_pixel_heads", c.dec_pixel_heads);
    get("train_pixel_samples", c.train_pixel_samples);
    get("infer_pixel_samples", c.infer_pixel_samples);
    if (j.contains("geo_backbone")) {
        const std::string s = j.at("geo_backbone");
        if (s == "internal_frozen") c.geo_backbone = GeoBackboneMode::kInternalFrozen;
        else if (s == "precomputed_files") c.geo_backbone = GeoBackboneMode::kPrecomputedFiles;
        else throw ConfigError(cat("model config: unknown geo_backbone '", s, "'"));
    }
    if (j.contains("branch_mode")) c.branch_mode = branch_mode_from_name(j.at("branch_mode"));
    c.validate();
    return c;
}

uint64_t ModelConfig::hash() const {
    const std::string s = to_json();
    return fnv1a64(s.data(), s.size());
}

Model::Model(ModelConfig config, uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    params_ = std::make_unique<ParamStore>(init_seed);
    ParamStore& ps = *params_;
    const ModelConfig& c = config_;

    geo_embed_ = PatchEmbedLayer(ps, "geo.backbone.embed", c.patch_size, 3, c.geo_dim);
    for (int i = 0; i < c.geo_layers; ++i) {
        geo_blocks_.emplace_back(ps, cat("geo.backbone.block", i), c.geo_dim, c.geo_heads,
                                 c.geo_dim * c.geo_mlp_ratio, /*exact_axis=*/false);
    }
    geo_head_ = FusionHead(ps, "geo.head", static_cast<int>(c.tap_layers_geo.size()), c.geo_dim,
                           c.branch_channels);
    geo_pre_proj_ = LinearLayer(ps, "geo.pre_proj", c.precomputed_geo_channels,
                                c.branch_channels);

    il_embed_ = PatchEmbedLayer(ps, "il.embed", c.patch_size, 3, c.il_dim);
    for (int i = 0; i < c.il_layers; ++i) {
        // even blocks mix within an image, odd blocks along the light axis
        const bool light_axis = (i % 2) == 1;
        il_blocks_.emplace_back(ps, cat("il.block", i), c.il_dim, c.il_heads,
                                c.il_dim * c.il_mlp_ratio, light_axis);
    }
    il_head_ = FusionHead(ps, "il.head", static_cast<int>(c.tap_layers_il.size()), c.il_dim,
                          c.branch_channels);

    const int fused = c.fused_channels();
    low_in_ = LinearLayer(ps, "dec.low_in", fused, c.dec_light_dim);
    for (int i = 0; i < c.dec_light_blocks; ++i) {
        low_blocks_.emplace_back(ps, cat("dec.low_block", i), c.dec_light_dim, c.dec_light_heads,
                                 c.dec_light_dim * 2, /*exact_axis=*/true);
    }
    low_pma_in_ = LinearLayer(ps, "dec.low_pma_in", c.dec_light_dim, c.dec_pma_dim);
    low_pma_block_ = TransformerBlock(ps, "dec.low_pma_block", c.dec_pma_dim, c.dec_pma_heads,
                                      c.dec_pma_dim * 2, /*exact_axis=*/true);
    low_pma_ = PmaLayer(ps, "dec.low_pma", c.dec_pma_dim, c.dec_pma_heads);
    for (int i = 0; i < c.dec_pixel_blocks; ++i) {
        low_pix_blocks_.emplace_back(ps, cat("dec.low_pix", i), c.dec_pma_dim, c.dec_pma_heads,
                                     c.dec_pma_dim * 2, /*exact_axis=*/false);
    }
    low_mlp1_ = LinearLayer(ps, "dec.low_mlp1", c.dec_pma_dim, c.dec_pma_dim / 2);
    low_mlp2_ = LinearLayer(ps, "dec.low_mlp2", c.dec_pma_dim / 2, 3);

    embed1_ = LinearLayer(ps, "dec.embed1", 3, c.dec_light_dim);
    embed_ln1_ = LayerNormLayer(ps, "dec.embed_ln1", c.dec_light_dim);
    embed2_ = LinearLayer(ps, "dec.embed2", c.dec_light_dim, c.dec_light_dim);
    embed_ln2_ = LayerNormLayer(ps, "dec.embed_ln2", c.dec_light_dim);
    high_in_ = LinearLayer(ps, "dec.high_in", fused + c.dec_light_dim, c.dec_light_dim);
    for (int i = 0; i < c.dec_light_blocks; ++i) {
        high_blocks_.emplace_back(ps, cat("dec.high_block", i), c.dec_light_dim,
                                  c.dec_light_heads, c.dec_light_dim * 2, /*exact_axis=*/true);
    }
    high_pma_in_ = LinearLayer(ps, "dec.high_pma_in", c.dec_light_dim, c.dec_pma_dim);
    high_pma_ = PmaLayer(ps, "dec.high_pma", c.dec_pma_dim, c.dec_pma_heads);
    const int fused_hi = c.dec_pma_dim + 3;
    for (int i = 0; i < c.dec_pixel_blocks; ++i) {
        high_pix_blocks_.emplace_back(ps, cat("dec.high_pix", i), fused_hi, c.dec_pixel_heads,
                                      fused_hi * 2, /*exact_axis=*/false);
    }
    final1_ = LinearLayer(ps, "dec.final1", fused_hi, c.dec_pma_dim);
    final2_ = LinearLayer(ps, "dec.final2", c.dec_pma_dim, c.dec_pma_dim / 2);
    final3_ = LinearLayer(ps, "dec.final3", c.dec_pma_dim / 2, 3);
}

Tensor Model::normalize_images(const std::vector<std::vector<float>>& images, int height,
                               int width) {
    if (images.empty()) throw ContractError("normalize_images: K must be >= 1");
    const size_t plane = static_cast<size_t>(height) * width * 3;
    float max_val = 0.0f;
    for (const auto& img : images) {
        if (img.size() != plane) throw ShapeError("normalize_images: image size mismatch");
        for (float v : img) max_val = std::max(max_val, v);
    }
    if (max_val <= 0.0f) {
        std::fprintf(stderr, "[unips] warning: all-zero image set fed to max-val normalization\n");
    }
    const float inv = 1.0f / std::max(max_val, 1e-12f);
    Tensor out = make_tensor({static_cast<int>(images.size()), height, width, 3}, false);
    float* po = out.ptr();
    for (size_t k = 0; k < images.size(); ++k) {
        const auto& img = images[k];
        for (size_t i = 0; i < plane; ++i) po[k * plane + i] = img[i] * inv;
    }
    return out;
}

Tensor Model::standardize_per_image(const Tensor& images) {
    if (images.rank() != 4 || images.dim(3) != 3) {
        throw ShapeError("standardize: want [K,H,W,3]");
    }
    const int k = images.dim(0), h = images.dim(1), w = images.dim(2);
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor out = make_tensor(images.shape(), false);
    const float* pi = images.ptr();
    float* po = out.ptr();
    for (int ki = 0; ki < k; ++ki) {
        for (int c = 0; c < 3; ++c) {
            double mean = 0.0;
            for (int64_t p = 0; p < plane; ++p) mean += pi[(ki * plane + p) * 3 + c];
            mean /= static_cast<double>(plane);
            double var = 0.0;
            for (int64_t p = 0; p < plane; ++p) {
                const double d = pi[(ki * plane + p) * 3 + c] - mean;
                var += d * d;
            }
            var /= static_cast<double>(plane);
            const double inv = 1.0 / (std::sqrt(var) + 1e-6);
            for (int64_t p = 0; p < plane; ++p) {
                po[(ki * plane + p) * 3 + c] =
                    static_cast<float>((pi[(ki * plane + p) * 3 + c] - mean) * inv);
            }
        }
    }
    return out;
}

Tensor Model::run_trunk(const Tensor& tokens, const std::vector<TransformerBlock>& blocks,
                        bool alternate_light_axis, const std::vector<int>& taps,
                        std::vector<Tensor>& tap_outputs) const {
    Tensor x = tokens;  // [K, T, D]
    size_t tap_pos = 0;
    for (size_t i = 0; i < blocks.size(); ++i) {
        const bool light = alternate_light_axis && (i % 2) == 1;
        if (light) {
            Tensor xt = permute(x, {1, 0, 2});  // [T, K, D]
            xt = blocks[i].forward(xt);
            x = permute(xt, {1, 0, 2});
        } else {
            x = blocks[i].forward(x);
        }
        if (tap_pos < taps.size() && static_cast<int>(i) == taps[tap_pos]) {
            tap_outputs.push_back(x);
            ++tap_pos;
        }
    }
    return x;
}

Tensor Model::encode_il(const Tensor& images) const {
    const int h = images.dim(1), w = images.dim(2);
    Tensor tokens = il_embed_.forward(images);
    std::vector<Tensor> taps;
    run_trunk(tokens, il_blocks_, /*alternate_light_axis=*/true, config_.tap_layers_il, taps);
    return il_head_.forward(taps, h / config_.patch_size, w / config_.patch_size, h / 2, w / 2);
}

Tensor Model::encode_geo(const Tensor& images, const Tensor& geo_precomputed) const {
    if (config_.geo_backbone == GeoBackboneMode::kPrecomputedFiles) {
        if (!geo_precomputed.defined()) {
            throw IoError("encode_geo: precomputed geometry features required but not provided");
        }
        if (geo_precomputed.rank() != 4 ||
            geo_precomputed.dim(3) != config_.precomputed_geo_channels ||
            geo_precomputed.dim(0) != images.dim(0) ||
            geo_precomputed.dim(1) != images.dim(1) / 2 ||
            geo_precomputed.dim(2) != images.dim(2) / 2) {
            throw ShapeError(cat("encode_geo: precomputed features ",
                                 shape_str(geo_precomputed.shape()), " do not match images ",
                                 shape_str(images.shape())));
        }
        return geo_pre_proj_.forward(geo_precomputed);
    }
    const int h = images.dim(1), w = images.dim(2);
    Tensor std_images = standardize_per_image(images);
    Tensor tokens = geo_embed_.forward(std_images);
    std::vector<Tensor> taps;
    run_trunk(tokens, geo_blocks_, /*alternate_light_axis=*/false, config_.tap_layers_geo, taps);
    return geo_head_.forward(taps, h / config_.patch_size, w / config_.patch_size, h / 2, w / 2);
}

FeatureMaps Model::encode(const Tensor& images, const Tensor& geo_precomputed) const {
    if (images.rank() != 4 || images.dim(3) != 3) throw ShapeError("encode: want [K,H,W,3]");
    const int h = images.dim(1), w = images.dim(2);
    if (h % (2 * config_.patch_size) != 0 || w % (2 * config_.patch_size) != 0) {
        throw ContractError(cat("encode: resolution ", h, "x", w, " not divisible by 2*patch = ",
                                2 * config_.patch_size));
    }
    const int k = images.dim(0);
    const Shape branch_shape{k, h / 2, w / 2, config_.branch_channels};

    Tensor geo_f, il_f;
    switch (config_.branch_mode) {
        case BranchMode::kDual:
            geo_f = encode_geo(images, geo_precomputed);
            il_f = encode_il(images);
            break;
        case BranchMode::kIlOnly:
            geo_f = Tensor::zeros(branch_shape);
            il_f = encode_il(images);
            break;
        case BranchMode::kGeoOnly:
            geo_f = encode_geo(images, geo_precomputed);
            il_f = Tensor::zeros(branch_shape);
            break;
    }
    if (geo_f.shape() != il_f.shape()) {
        throw Error(cat("encode: branch shapes differ: ", shape_str(geo_f.shape()), " vs ",
                        shape_str(il_f.shape())));
    }
    return FeatureMaps{concat_lastdim(geo_f, il_f)};
}

DecodedNormals Model::decode(const FeatureMaps& features, const Tensor& pixels,
                             const std::vector<int>& pixel_indices) const {
    if (pixel_indices.empty()) throw ContractError("decode: P must be >= 1");
    const Tensor& grid = features.grid;
    if (grid.rank() != 4) throw ShapeError("decode: features must be [K,H/2,W/2,C]");
    const int k = grid.dim(0), h2 = grid.dim(1), w2 = grid.dim(2), c = grid.dim(3);
    if (pixels.rank() != 4 || pixels.dim(0) != k) {
        throw ContractError("decode: K mismatch between features and pixels");
    }
    const int h = pixels.dim(1), w = pixels.dim(2);
    if (h != h2 * 2 || w != w2 * 2) {
        throw ShapeError("decode: features are not at half the pixel resolution");
    }

    // X down: floor halving of the full-resolution coordinates
    std::vector<int> down_indices(pixel_indices.size());
    for (size_t i = 0; i < pixel_indices.size(); ++i) {
        const int idx = pixel_indices[i];
        if (idx < 0 || idx >= h * w) {
            throw ContractError(cat("decode: pixel index ", idx, " outside [0,", h * w, ")"));
        }
        down_indices[i] = (idx / w / 2) * w2 + (idx % w) / 2;
    }
    const int p = static_cast<int>(pixel_indices.size());

    Tensor feat_tokens = gather_dim1(reshape(grid, {k, h2 * w2, c}), down_indices);  // [K,P,C]
    feat_tokens = permute(feat_tokens, {1, 0, 2});                                   // [P,K,C]
    Tensor px_tokens = gather_dim1(reshape(pixels, {k, h * w, 3}), pixel_indices);   // [K,P,3]
    px_tokens = permute(px_tokens, {1, 0, 2});                                       // [P,K,3]

    // low scale: features only
    Tensor x = low_in_.forward(feat_tokens);  // [P,K,Ld]
    for (const auto& blk : low_blocks_) x = blk.forward(x);
    x = low_pma_in_.forward(x);
    x = low_pma_block_.forward(x);
    Tensor pooled_low = low_pma_.forward(x);  // [P,Pd]
    Tensor t_low = reshape(pooled_low, {1, p, config_.dec_pma_dim});
    for (const auto& blk : low_pix_blocks_) t_low = blk.forward(t_low);
    t_low = reshape(t_low, {p, config_.dec_pma_dim});
    Tensor low = l2_normalize_lastdim(
        low_mlp2_.forward(gelu(low_mlp1_.forward(t_low))));  // [P,3]

    // high scale: RGB embedding joined with features, pooled, fused with
    // the low-scale normals, then spatial self-attention over the samples
    Tensor e = embed_ln1_.forward(embed1_.forward(px_tokens));
    e = embed_ln2_.forward(embed2_.forward(gelu(e)));  // [P,K,Ld]
    Tensor hx = concat_lastdim(feat_tokens, e);
    hx = high_in_.forward(hx);
    for (const auto& blk : high_blocks_) hx = blk.forward(hx);
    hx = high_pma_in_.forward(hx);
    Tensor pooled_high = high_pma_.forward(hx);            // [P,Pd]
    Tensor fused = concat_lastdim(pooled_high, low);       // [P,Pd+3]
    Tensor t_high = reshape(fused, {1, p, config_.dec_pma_dim + 3});
    for (const auto& blk : high_pix_blocks_) t_high = blk.forward(t_high);
    t_high = reshape(t_high, {p, config_.dec_pma_dim + 3});
    Tensor head = gelu(final1_.forward(t_high));
    head = gelu(final2_.forward(head));
    Tensor high = l2_normalize_lastdim(final3_.forward(head));

    return {low, high};
}

std::vector<float> Model::infer_full(const MultiIllumSet& set,
                                     const Tensor& geo_precomputed) const {
    NoGradGuard no_grad;
    const int h = set.height, w = set.width;
    if (h % (2 * config_.patch_size) != 0 || w % (2 * config_.patch_size) != 0) {
        throw ContractError(cat("infer_full: resolution ", h, "x", w,
                                " not divisible by 2*patch = ", 2 * config_.patch_size));
    }
    Tensor images = normalize_images(set.images, h, w);
    FeatureMaps features = encode(images, geo_precomputed);

    std::vector<float> out(static_cast<size_t>(h) * w * 3, 0.0f);
    const int total = h * w;
    const int chunk = config_.infer_pixel_samples;
    for (int start = 0; start < total; start += chunk) {
        const int count = std::min(chunk, total - start);
        std::vector<int> indices(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) indices[static_cast<size_t>(i)] = start + i;
        DecodedNormals dec = decode(features, images, indices);
        const float* src = dec.high.ptr();
        std::copy(src, src + static_cast<size_t>(count) * 3,
                  out.begin() + static_cast<size_t>(start) * 3);
    }
    return out;
}

std::vector<Tensor> Model::geo_trunk_taps(const Tensor& images_raw) const {
    Tensor std_images = standardize_per_image(images_raw);
    Tensor tokens = geo_embed_.forward(std_images);
    std::vector<Tensor> taps;
    run_trunk(tokens, geo_blocks_, false, config_.tap_layers_geo, taps);
    return taps;
}

Tensor Model::geo_head_from_taps(const std::vector<Tensor>& taps, int height, int width) const {
    return geo_head_.forward(taps, height / config_.patch_size, width / config_.patch_size,
                             height / 2, width / 2);
}

FeatureMaps Model::encode_with_geo_taps(const Tensor& images,
                                        const std::vector<Tensor>& taps) const {
    if (config_.branch_mode == BranchMode::kIlOnly) return encode(images);
    const int h = images.dim(1), w = images.dim(2);
    if (h % (2 * config_.patch_size) != 0 || w % (2 * config_.patch_size) != 0) {
        throw ContractError(cat("encode: resolution ", h, "x", w, " not divisible by 2*patch = ",
                                2 * config_.patch_size));
    }
    Tensor geo_f = geo_head_from_taps(taps, h, w);
    Tensor il_f = config_.branch_mode == BranchMode::kGeoOnly
                      ? Tensor::zeros(geo_f.shape())
                      : encode_il(images);
    return FeatureMaps{concat_lastdim(geo_f, il_f)};
}

Tensor Model::geo_trunk_tokens(const Tensor& image) const {
    Tensor tokens = geo_embed_.forward(image);
    std::vector<Tensor> taps;
    std::vector<int> no_taps;
    return run_trunk(tokens, geo_blocks_, false, no_taps, taps);
}

void Model::freeze_geo_backbone() {
    params_->freeze_prefix("geo.backbone.");
    geo_frozen_ = true;
}

uint64_t Model::geo_backbone_hash() const { return params_->content_hash("geo.backbone."); }

void save_model_checkpoint(const std::string& path, const Model& model,
                           const std::string& kind) {
    json meta;
    meta["kind"] = kind;
    meta["config"] = json::parse(model.config().to_json());
    meta["config_hash"] = hex64(model.config().hash());
    meta["geo_backbone_hash"] = hex64(model.geo_backbone_hash());
    meta["geo_frozen"] = model.geo_backbone_frozen();
    save_checkpoint(path, model.params(), meta.dump());
}

LoadedModel load_model_checkpoint(const std::string& path,
                                  const std::optional<ModelConfig>& expect_config, bool force) {
    Checkpoint ckpt = load_checkpoint(path);
    json meta;
    try {
        meta = json::parse(ckpt.meta_json);
    } catch (const json::exception& e) {
        throw IoError(cat(path, ": bad checkpoint meta: ", e.what()));
    }
    ModelConfig cfg = ModelConfig::from_json(meta.at("config").dump());
    if (expect_config && expect_config->hash() != cfg.hash() && !force) {
        throw ConfigError(cat(path, ": checkpoint config hash ", hex64(cfg.hash()),
                              " does not match the requested configuration ",
                              hex64(expect_config->hash()), " (use --force to override)"));
    }
    LoadedModel out;
    out.model = std::make_unique<Model>(cfg, /*init_seed=*/0);
    apply_checkpoint(ckpt, out.model->params());
    if (meta.value("geo_frozen", false)) out.model->freeze_geo_backbone();
    out.kind = meta.value("kind", "model");
    return out;
}

void apply_checkpoint_prefix(const Checkpoint& ckpt, ParamStore& store,
                             const std::string& prefix) {
    size_t applied = 0;
    for (const auto& rec : ckpt.records) {
        if (rec.name.rfind(prefix, 0) != 0) continue;
        Tensor* t = store.find(rec.name);
        if (!t) throw IoError(cat("checkpoint parameter '", rec.name, "' not in model"));
        if (t->shape() != rec.shape) {
            throw IoError(cat("parameter '", rec.name, "': shape mismatch on prefix transfer"));
        }
        t->data() = rec.values;
        ++applied;
    }
    if (applied == 0) throw IoError(cat("checkpoint has no parameters under prefix '", prefix, "'"));
}

Tensor load_geo_features(const std::string& path) {
    std::vector<uint32_t> dims;
    std::vector<float> data = read_f32_blob(path, "GEOF", 4, dims);
    const int64_t expect = static_cast<int64_t>(dims[0]) * dims[1] * dims[2] * dims[3];
    if (static_cast<int64_t>(data.size()) != expect) {
        throw IoError(cat(path, ": payload size mismatch"));
    }
    return Tensor::from_data({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                              static_cast<int>(dims[2]), static_cast<int>(dims[3])},
                             std::move(data));
}

Tensor geo_features_for_scene(const ModelConfig& config, const std::string& scene_dir) {
    if (config.geo_backbone != GeoBackboneMode::kPrecomputedFiles ||
        config.branch_mode == BranchMode::kIlOnly) {
        return Tensor();
    }
    return load_geo_features(scene_dir + "/geo_feat.f32");
}

Tensor select_geo_rows(const Tensor& grid, const std::vector<int>& rows) {
    if (grid.rank() < 1) throw ShapeError("select_geo_rows: undefined grid");
    const int k = grid.dim(0);
    const int64_t stride = grid.numel() / k;
    Shape shape = grid.shape();
    shape[0] = static_cast<int>(rows.size());
    Tensor out = make_tensor(shape, false);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= k) {
            throw ShapeError(cat("select_geo_rows: row ", rows[i], " outside [0,", k, ")"));
        }
        std::copy(grid.ptr() + rows[i] * stride, grid.ptr() + (rows[i] + 1) * stride,
                  out.ptr() + static_cast<int64_t>(i) * stride);
    }
    return out;
}

Tensor select_geo_rows(const Tensor& grid, int first_k) {
    std::vector<int> rows(static_cast<size_t>(first_k));
    for (int i = 0; i < first_k; ++i) rows[static_cast<size_t>(i)] = i;
    return select_geo_rows(grid, rows);
}

void save_geo_features(const std::string& path, const Tensor& grid) {
    if (grid.rank() != 4) throw ShapeError("geo features must be [K,H',W',C]");
    write_f32_blob(path, "GEOF",
                   {static_cast<uint32_t>(grid.dim(0)), static_cast<uint32_t>(grid.dim(1)),
                    static_cast<uint32_t>(grid.dim(2)), static_cast<uint32_t>(grid.dim(3))},
                   grid.ptr(), static_cast<size_t>(grid.numel()));
}

}  // namespace unips
