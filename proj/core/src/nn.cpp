#include "unips/nn.hpp"

#include <cmath>

namespace unips {

ParamStore::ParamStore(uint64_t seed) : rng_(seed) {}

Tensor ParamStore::insert(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError(cat("duplicate parameter name: ", name));
    index_[name] = entries_.size();
    entries_.push_back({name, t, true});
    return t;
}

Tensor ParamStore::xavier(const std::string& name, int in, int out) {
    const float limit = std::sqrt(6.0f / static_cast<float>(in + out));
    return insert(name, Tensor::uniform({in, out}, rng_, -limit, limit, true));
}

Tensor ParamStore::zeros(const std::string& name, const Shape& shape) {
    return insert(name, Tensor::zeros(shape, true));
}

Tensor ParamStore::ones(const std::string& name, const Shape& shape) {
    return insert(name, Tensor::full(shape, 1.0f, true));
}

Tensor ParamStore::normal(const std::string& name, const Shape& shape, float stddev) {
    return insert(name, Tensor::randn(shape, rng_, stddev, true));
}

Tensor* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return nullptr;
    return &entries_[it->second].tensor;
}

void ParamStore::freeze_prefix(const std::string& prefix) {
    for (auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) {
            e.trainable = false;
            e.tensor.set_requires_grad(false);
        }
    }
}

bool ParamStore::is_frozen(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(cat("unknown parameter: ", name));
    return !entries_[it->second].trainable;
}

void ParamStore::zero_grads() {
    for (auto& e : entries_) e.tensor.drop_grad();
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

int64_t ParamStore::trainable_params() const {
    int64_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += e.tensor.numel();
    }
    return n;
}

uint64_t ParamStore::content_hash(const std::string& prefix) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        h = fnv1a64(e.name.data(), e.name.size(), h);
        h = fnv1a64(e.tensor.ptr(), sizeof(float) * static_cast<size_t>(e.tensor.numel()), h);
    }
    return h;
}

LinearLayer::LinearLayer(ParamStore& ps, const std::string& name, int in, int out, bool bias) {
    w = ps.xavier(name + ".w", in, out);
    if (bias) b = ps.zeros(name + ".b", {out});
}

Tensor LinearLayer::forward(const Tensor& x) const {
    return b.defined() ? linear(x, w, b) : linear(x, w);
}

LayerNormLayer::LayerNormLayer(ParamStore& ps, const std::string& name, int dim) {
    gain = ps.ones(name + ".gain", {dim});
    bias = ps.zeros(name + ".bias", {dim});
}

Tensor LayerNormLayer::forward(const Tensor& x) const { return layernorm(x, gain, bias, eps); }

MlpLayer::MlpLayer(ParamStore& ps, const std::string& name, int dim, int hidden)
    : fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim) {}

Tensor MlpLayer::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

AttentionLayer::AttentionLayer(ParamStore& ps, const std::string& name, int dim_, int heads_,
                               bool exact)
    // key projection has no bias: a constant key shift cancels in softmax
    : wq(ps, name + ".wq", dim_, dim_),
      wk(ps, name + ".wk", dim_, dim_, /*bias=*/false),
      wv(ps, name + ".wv", dim_, dim_),
      wo(ps, name + ".wo", dim_, dim_),
      heads(heads_),
      dim(dim_),
      exact_axis(exact) {
    if (dim_ % heads_ != 0) {
        throw ConfigError(cat("attention dim ", dim_, " not divisible by heads ", heads_));
    }
}

namespace {
// [B,S,D] -> [B*h, S, D/h]
Tensor split_heads(const Tensor& x, int heads) {
    const int b = x.dim(0), s = x.dim(1), d = x.dim(2);
    const int dh = d / heads;
    Tensor r = reshape(x, {b, s, heads, dh});
    Tensor p = permute(r, {0, 2, 1, 3});
    return reshape(p, {b * heads, s, dh});
}

Tensor merge_heads(const Tensor& x, int b, int heads) {
    const int s = x.dim(1), dh = x.dim(2);
    Tensor r = reshape(x, {b, heads, s, dh});
    Tensor p = permute(r, {0, 2, 1, 3});
    return reshape(p, {b, s, heads * dh});
}
}  // namespace

Tensor AttentionLayer::forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
        throw ShapeError("attention: inputs must be [B,S,D]");
    }
    const int b = q.dim(0);
    Tensor qh = split_heads(wq.forward(q), heads);
    Tensor kh = split_heads(wk.forward(k), heads);
    Tensor vh = split_heads(wv.forward(v), heads);

    Tensor mixed;
    if (exact_axis) {
        mixed = attention_core(qh, kh, vh);
    } else {
        const int dh = dim / heads;
        Tensor scores =
            batched_matmul_nt(scale(qh, 1.0f / std::sqrt(static_cast<float>(dh))), kh);
        Tensor attn = softmax_lastdim(scores);
        mixed = batched_matmul(attn, vh);
    }
    return wo.forward(merge_heads(mixed, b, heads));
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& name, int dim, int heads,
                                   int mlp_hidden, bool exact_axis)
    : ln1(ps, name + ".ln1", dim),
      ln2(ps, name + ".ln2", dim),
      attn(ps, name + ".attn", dim, heads, exact_axis),
      mlp(ps, name + ".mlp", dim, mlp_hidden) {}

Tensor TransformerBlock::forward(const Tensor& x) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, attn.forward(h, h, h));
    return add(y, mlp.forward(ln2.forward(y)));
}

PmaLayer::PmaLayer(ParamStore& ps, const std::string& name, int dim, int heads)
    : attn(ps, name + ".attn", dim, heads, /*exact_axis=*/true) {
    seed = ps.normal(name + ".seed", {1, 1, dim}, 0.02f);
}

Tensor PmaLayer::forward(const Tensor& x) const {
    const int b = x.dim(0), d = x.dim(2);
    Tensor q = expand_dim0(seed, b);
    Tensor pooled = attn.forward(q, x, x);  // [B,1,D]
    return reshape(pooled, {b, d});
}

PatchEmbedLayer::PatchEmbedLayer(ParamStore& ps, const std::string& name, int patch_,
                                 int in_channels_, int dim)
    : proj(ps, name + ".proj", patch_ * patch_ * in_channels_, dim),
      patch(patch_),
      in_channels(in_channels_) {}

Tensor PatchEmbedLayer::forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(3) != in_channels) {
        throw ShapeError(cat("patch embed: want [B,H,W,", in_channels, "], got ",
                             shape_str(x.shape())));
    }
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % patch != 0 || w % patch != 0) {
        throw ContractError(cat("patch embed: resolution ", h, "x", w,
                                " not divisible by patch size ", patch));
    }
    Tensor cols = im2col(x, patch, patch, patch, 0);
    Tensor tokens = proj.forward(cols);
    return reshape(tokens, {b, (h / patch) * (w / patch), tokens.dim(-1)});
}

Conv3x3Layer::Conv3x3Layer(ParamStore& ps, const std::string& name, int in_channels_,
                           int out_channels)
    : proj(ps, name + ".proj", 9 * in_channels_, out_channels), in_channels(in_channels_) {}

Tensor Conv3x3Layer::forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(3) != in_channels) {
        throw ShapeError(cat("conv3x3: want [B,H,W,", in_channels, "], got ",
                             shape_str(x.shape())));
    }
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor cols = im2col(x, 3, 3, 1, 1);
    Tensor y = proj.forward(cols);
    return reshape(y, {b, h, w, y.dim(-1)});
}

FusionHead::FusionHead(ParamStore& ps, const std::string& name, int taps, int token_dim,
                       int out_channels_)
    : conv1(ps, name + ".conv1", out_channels_, out_channels_),
      conv2(ps, name + ".conv2", out_channels_, out_channels_),
      out_channels(out_channels_) {
    for (int t = 0; t < taps; ++t) {
        tap_proj.emplace_back(ps, cat(name, ".tap", t), token_dim, out_channels_);
    }
}

Tensor FusionHead::forward(const std::vector<Tensor>& taps, int gh, int gw, int out_h,
                           int out_w) const {
    if (taps.size() != tap_proj.size()) {
        throw ShapeError(cat("fusion head: got ", taps.size(), " taps, configured for ",
                             tap_proj.size()));
    }
    Tensor acc;
    for (size_t t = 0; t < taps.size(); ++t) {
        const int b = taps[t].dim(0);
        Tensor proj = tap_proj[t].forward(taps[t]);                 // [B, gh*gw, C]
        Tensor grid = reshape(proj, {b, gh, gw, out_channels});
        Tensor up = bilinear_upsample(grid, out_h, out_w);
        acc = acc.defined() ? add(acc, up) : up;
    }
    return conv2.forward(gelu(conv1.forward(acc)));
}

}  // namespace unips
