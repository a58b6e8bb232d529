#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "unips/ops.hpp"
#include "unips/tensor.hpp"

namespace unips {

struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// Named parameter registry. Registration order is the serialization order,
// so identical construction sequences give identical checkpoints.
class ParamStore {
public:
    explicit ParamStore(uint64_t seed);

    Tensor xavier(const std::string& name, int in, int out);
    Tensor zeros(const std::string& name, const Shape& shape);
    Tensor ones(const std::string& name, const Shape& shape);
    Tensor normal(const std::string& name, const Shape& shape, float stddev);

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }
    Tensor* find(const std::string& name);

    // Marks parameters under a name prefix as frozen: no gradients, no
    // optimizer updates. Values stay serialized in checkpoints.
    void freeze_prefix(const std::string& prefix);
    bool is_frozen(const std::string& name) const;

    void zero_grads();
    int64_t total_params() const;
    int64_t trainable_params() const;

    // Fingerprint of the raw bytes of parameters under a prefix.
    uint64_t content_hash(const std::string& prefix) const;

private:
    Tensor insert(const std::string& name, Tensor t);
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, size_t> index_;
    std::mt19937_64 rng_;
};

struct LinearLayer {
    Tensor w, b;
    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& name, int in, int out, bool bias = true);
    Tensor forward(const Tensor& x) const;
};

struct LayerNormLayer {
    Tensor gain, bias;
    float eps = 1e-5f;
    LayerNormLayer() = default;
    LayerNormLayer(ParamStore& ps, const std::string& name, int dim);
    Tensor forward(const Tensor& x) const;
};

struct MlpLayer {
    LinearLayer fc1, fc2;
    MlpLayer() = default;
    MlpLayer(ParamStore& ps, const std::string& name, int dim, int hidden);
    Tensor forward(const Tensor& x) const;
};

// Multi-head attention with learned projections. When `exact_axis` is set
// the attended axis is reduced with the order-stable double-precision core
// (used for every light-axis reduction); otherwise the BLAS-composed path
// is used (frame and pixel attention, where no cross-image mixing occurs).
struct AttentionLayer {
    LinearLayer wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;
    bool exact_axis = false;
    AttentionLayer() = default;
    AttentionLayer(ParamStore& ps, const std::string& name, int dim, int heads, bool exact_axis);
    // q [B,Sq,D], k/v [B,Sk,D] -> [B,Sq,D]
    Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;
};

// Pre-norm residual transformer block; attends over the middle axis of
// [B,S,D]. Callers permute so S is the axis to mix.
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    AttentionLayer attn;
    MlpLayer mlp;
    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& name, int dim, int heads, int mlp_hidden,
                     bool exact_axis);
    Tensor forward(const Tensor& x) const;
};

// Pooling by multi-head attention: one learned seed queries the set, the
// set axis collapses to a single summary vector.
struct PmaLayer {
    Tensor seed;
    AttentionLayer attn;
    PmaLayer() = default;
    PmaLayer(ParamStore& ps, const std::string& name, int dim, int heads);
    // x [B,S,D] -> [B,D]
    Tensor forward(const Tensor& x) const;
};

// Non-overlapping patch tokenizer: [B,H,W,Cin] -> [B, (H/ps)*(W/ps), D].
struct PatchEmbedLayer {
    LinearLayer proj;
    int patch = 0;
    int in_channels = 0;
    PatchEmbedLayer() = default;
    PatchEmbedLayer(ParamStore& ps, const std::string& name, int patch, int in_channels, int dim);
    Tensor forward(const Tensor& x) const;
};

// 3x3 stride-1 same-padding convolution on [B,H,W,C].
struct Conv3x3Layer {
    LinearLayer proj;
    int in_channels = 0;
    Conv3x3Layer() = default;
    Conv3x3Layer(ParamStore& ps, const std::string& name, int in_channels, int out_channels);
    Tensor forward(const Tensor& x) const;
};

// Multi-level fusion head: per-tap projection to the branch width, bilinear
// upsample to the half-resolution grid, sum, then two conv refinements.
struct FusionHead {
    std::vector<LinearLayer> tap_proj;
    Conv3x3Layer conv1, conv2;
    int out_channels = 0;
    FusionHead() = default;
    FusionHead(ParamStore& ps, const std::string& name, int taps, int token_dim, int out_channels);
    // taps: token tensors [B, gh*gw, D]; returns [B, out_h, out_w, C].
    Tensor forward(const std::vector<Tensor>& taps, int gh, int gw, int out_h, int out_w) const;
};

}  // namespace unips
