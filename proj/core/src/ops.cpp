#include "unips/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

namespace unips {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                             shape_str(b.shape())));
    }
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}

// dst[j] = src[inverse mapping] for an axis permutation of a dense tensor.
void permute_copy(const float* src, const Shape& in_shape, const std::vector<int>& perm,
                  float* dst, bool accumulate) {
    const int r = static_cast<int>(in_shape.size());
    Shape out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];

    std::vector<int64_t> in_strides(r, 1), out_strides(r, 1);
    for (int i = r - 2; i >= 0; --i) {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // stride of output axis i in the source layout
    std::vector<int64_t> src_stride_for_out(r);
    for (int i = 0; i < r; ++i) src_stride_for_out[i] = in_strides[perm[i]];

    const int64_t n = shape_numel(in_shape);
    std::vector<int> idx(r, 0);
    int64_t src_off = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        if (accumulate) {
            dst[flat] += src[src_off];
        } else {
            dst[flat] = src[src_off];
        }
        for (int ax = r - 1; ax >= 0; --ax) {
            if (++idx[ax] < out_shape[ax]) {
                src_off += src_stride_for_out[ax];
                break;
            }
            idx[ax] = 0;
            src_off -= src_stride_for_out[ax] * (out_shape[ax] - 1);
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_tensor(a.shape(), track_grad(a, b));
    const int64_t n = a.numel();
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (out.requires_grad()) {
        Tape::current().record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) accumulate_grad(a, go.data(), out.numel());
            if (b.requires_grad()) accumulate_grad(b, go.data(), out.numel());
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_tensor(a.shape(), track_grad(a, b));
    const int64_t n = a.numel();
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (out.requires_grad()) {
        Tape::current().record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const int64_t n2 = out.numel();
            if (a.requires_grad()) accumulate_grad(a, go.data(), n2);
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t i = 0; i < n2; ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_tensor(a.shape(), track_grad(a, b));
    const int64_t n = a.numel();
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (out.requires_grad()) {
        Tape::current().record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const int64_t n2 = out.numel();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                const float* pb2 = b.ptr();
                for (int64_t i = 0; i < n2; ++i) ga[i] += go[i] * pb2[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const float* pa2 = a.ptr();
                for (int64_t i = 0; i < n2; ++i) gb[i] += go[i] * pa2[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = make_tensor(a.shape(), track_grad(a));
    const int64_t n = a.numel();
    const float* pa = a.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    if (out.requires_grad()) {
        Tape::current().record([a, out, s]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& ga = a.grad();
            const int64_t n2 = out.numel();
            for (int64_t i = 0; i < n2; ++i) ga[i] += go[i] * s;
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    Tensor out = make_tensor(a.shape(), track_grad(a));
    const int64_t n = a.numel();
    const float* pa = a.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
    if (out.requires_grad()) {
        Tape::current().record([a, out]() {
            if (!out.has_grad()) return;
            accumulate_grad(a, out.grad().data(), out.numel());
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError(cat("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                             shape_str(b.shape())));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_tensor({m, n}, track_grad(a, b));
    gemm(false, false, m, n, k, a.ptr(), k, b.ptr(), n, 0.0f, out.ptr(), n);
    if (out.requires_grad()) {
        Tape::current().record([a, b, out, m, n, k]() {
            if (!out.has_grad()) return;
            const float* go = out.grad().data();
            if (a.requires_grad()) {
                gemm(false, true, m, k, n, go, n, b.ptr(), n, 1.0f, a.grad().data(), k);
            }
            if (b.requires_grad()) {
                gemm(true, false, k, n, m, a.ptr(), k, go, n, 1.0f, b.grad().data(), n);
            }
        });
    }
    return out;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError(cat("batched_matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                             shape_str(b.shape())));
    }
    const int bt = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out = make_tensor({bt, m, n}, track_grad(a, b));
    for (int i = 0; i < bt; ++i) {
        gemm(false, false, m, n, k, a.ptr() + static_cast<int64_t>(i) * m * k, k,
             b.ptr() + static_cast<int64_t>(i) * k * n, n, 0.0f,
             out.ptr() + static_cast<int64_t>(i) * m * n, n);
    }
    if (out.requires_grad()) {
        Tape::current().record([a, b, out, bt, m, n, k]() {
            if (!out.has_grad()) return;
            const float* go = out.grad().data();
            for (int i = 0; i < bt; ++i) {
                const float* goi = go + static_cast<int64_t>(i) * m * n;
                if (a.requires_grad()) {
                    gemm(false, true, m, k, n, goi, n, b.ptr() + static_cast<int64_t>(i) * k * n,
                         n, 1.0f, a.grad().data() + static_cast<int64_t>(i) * m * k, k);
                }
                if (b.requires_grad()) {
                    gemm(true, false, k, n, m, a.ptr() + static_cast<int64_t>(i) * m * k, k, goi,
                         n, 1.0f, b.grad().data() + static_cast<int64_t>(i) * k * n, n);
                }
            }
        });
    }
    return out;
}

Tensor batched_matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
        throw ShapeError(cat("batched_matmul_nt: incompatible shapes ", shape_str(a.shape()),
                             " x ", shape_str(b.shape()), "^T"));
    }
    const int bt = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor out = make_tensor({bt, m, n}, track_grad(a, b));
    for (int i = 0; i < bt; ++i) {
        gemm(false, true, m, n, k, a.ptr() + static_cast<int64_t>(i) * m * k, k,
             b.ptr() + static_cast<int64_t>(i) * n * k, k, 0.0f,
             out.ptr() + static_cast<int64_t>(i) * m * n, n);
    }
    if (out.requires_grad()) {
        Tape::current().record([a, b, out, bt, m, n, k]() {
            if (!out.has_grad()) return;
            const float* go = out.grad().data();
            for (int i = 0; i < bt; ++i) {
                const float* goi = go + static_cast<int64_t>(i) * m * n;
                if (a.requires_grad()) {
                    // dA = dC * B
                    gemm(false, false, m, k, n, goi, n,
                         b.ptr() + static_cast<int64_t>(i) * n * k, k, 1.0f,
                         a.grad().data() + static_cast<int64_t>(i) * m * k, k);
                }
                if (b.requires_grad()) {
                    // dB = dC^T * A
                    gemm(true, false, n, k, m, goi, n,
                         a.ptr() + static_cast<int64_t>(i) * m * k, k, 1.0f,
                         b.grad().data() + static_cast<int64_t>(i) * n * k, k);
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
        throw ShapeError(cat("linear: input ", shape_str(x.shape()), " incompatible with weight ",
                             shape_str(w.shape())));
    }
    const int in = w.dim(0), out_dim = w.dim(1);
    const int64_t rows = x.numel() / in;
    const bool with_bias = bias.defined();
    if (with_bias && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
        throw ShapeError(cat("linear: bias ", shape_str(bias.shape()), " does not match out dim ",
                             out_dim));
    }

    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    bool rg = track_grad(x, w) || (with_bias && track_grad(bias));
    Tensor out = make_tensor(out_shape, rg);
    gemm(false, false, static_cast<int>(rows), out_dim, in, x.ptr(), in, w.ptr(), out_dim, 0.0f,
         out.ptr(), out_dim);
    if (with_bias) {
        float* po = out.ptr();
        const float* pb = bias.ptr();
        for (int64_t r = 0; r < rows; ++r) {
            for (int c = 0; c < out_dim; ++c) po[r * out_dim + c] += pb[c];
        }
    }
    if (out.requires_grad()) {
        Tape::current().record([x, w, bias, out, rows, in, out_dim, with_bias]() {
            if (!out.has_grad()) return;
            const float* go = out.grad().data();
            if (x.requires_grad()) {
                gemm(false, true, static_cast<int>(rows), in, out_dim, go, out_dim, w.ptr(),
                     out_dim, 1.0f, x.grad().data(), in);
            }
            if (w.requires_grad()) {
                gemm(true, false, in, out_dim, static_cast<int>(rows), x.ptr(), in, go, out_dim,
                     1.0f, w.grad().data(), out_dim);
            }
            if (with_bias && bias.requires_grad()) {
                auto& gb = bias.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int c = 0; c < out_dim; ++c) gb[c] += go[r * out_dim + c];
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

Tensor add_bias_lastdim(const Tensor& x, const Tensor& bias) {
    const int n = x.dim(-1);
    if (bias.rank() != 1 || bias.dim(0) != n) {
        throw ShapeError(cat("add_bias: bias ", shape_str(bias.shape()), " vs last dim ", n));
    }
    Tensor out = make_tensor(x.shape(), track_grad(x, bias));
    const int64_t rows = x.numel() / n;
    const float* px = x.ptr();
    const float* pb = bias.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        for (int c = 0; c < n; ++c) po[r * n + c] = px[r * n + c] + pb[c];
    }
    if (out.requires_grad()) {
        Tape::current().record([x, bias, out, rows, n]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (x.requires_grad()) accumulate_grad(x, go.data(), out.numel());
            if (bias.requires_grad()) {
                auto& gb = bias.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int c = 0; c < n; ++c) gb[c] += go[r * n + c];
                }
            }
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) {
        throw ShapeError(cat("permute: ", perm.size(), " axes for rank ", r));
    }
    std::vector<bool> seen(r, false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[p]) throw ShapeError("permute: invalid axis permutation");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
    Tensor out = make_tensor(out_shape, track_grad(x));
    permute_copy(x.ptr(), x.shape(), perm, out.ptr(), false);
    if (out.requires_grad()) {
        std::vector<int> inv(r);
        for (int i = 0; i < r; ++i) inv[perm[i]] = i;
        Tape::current().record([x, out, inv]() {
            if (!out.has_grad()) return;
            permute_copy(out.grad().data(), out.shape(), inv, x.grad().data(), true);
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError(cat("reshape: ", shape_str(x.shape()), " -> ", shape_str(shape),
                             " changes element count"));
    }
    Tensor out = make_tensor(shape, track_grad(x));
    std::copy(x.ptr(), x.ptr() + x.numel(), out.ptr());
    if (out.requires_grad()) {
        Tape::current().record([x, out]() {
            if (!out.has_grad()) return;
            accumulate_grad(x, out.grad().data(), out.numel());
        });
    }
    return out;
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError(cat("concat: leading dims differ ", shape_str(a.shape()), " vs ",
                                 shape_str(b.shape())));
        }
    }
    const int na = a.dim(-1), nb = b.dim(-1);
    Shape out_shape = a.shape();
    out_shape.back() = na + nb;
    Tensor out = make_tensor(out_shape, track_grad(a, b));
    const int64_t rows = a.numel() / na;
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(pa + r * na, pa + (r + 1) * na, po + r * (na + nb));
        std::copy(pb + r * nb, pb + (r + 1) * nb, po + r * (na + nb) + na);
    }
    if (out.requires_grad()) {
        Tape::current().record([a, b, out, rows, na, nb]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int c = 0; c < na; ++c) ga[r * na + c] += go[r * (na + nb) + c];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int c = 0; c < nb; ++c) gb[r * nb + c] += go[r * (na + nb) + na + c];
                }
            }
        });
    }
    return out;
}

Tensor gather_dim1(const Tensor& x, const std::vector<int>& indices) {
    if (x.rank() != 3) throw ShapeError(cat("gather_dim1: want rank 3, got ", x.rank()));
    const int a = x.dim(0), s = x.dim(1), c = x.dim(2);
    const int p = static_cast<int>(indices.size());
    if (p == 0) throw ContractError("gather_dim1: empty index list");
    for (int idx : indices) {
        if (idx < 0 || idx >= s) throw ShapeError(cat("gather_dim1: index ", idx, " out of [0,", s, ")"));
    }
    Tensor out = make_tensor({a, p, c}, track_grad(x));
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int i = 0; i < a; ++i) {
        for (int j = 0; j < p; ++j) {
            const float* src = px + (static_cast<int64_t>(i) * s + indices[j]) * c;
            std::copy(src, src + c, po + (static_cast<int64_t>(i) * p + j) * c);
        }
    }
    if (out.requires_grad()) {
        Tape::current().record([x, out, indices, a, s, c, p]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (int i = 0; i < a; ++i) {
                for (int j = 0; j < p; ++j) {
                    float* dst = gx.data() + (static_cast<int64_t>(i) * s + indices[j]) * c;
                    const float* src = go.data() + (static_cast<int64_t>(i) * p + j) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    const int n = x.dim(-1);
    const int64_t rows = x.numel() / n;
    Tensor out = make_tensor(x.shape(), track_grad(x));
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * n;
        float* yr = po + r * n;
        float m = xr[0];
        for (int i = 1; i < n; ++i) m = std::max(m, xr[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const float e = std::exp(xr[i] - m);
            yr[i] = e;
            sum += e;
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int i = 0; i < n; ++i) yr[i] *= inv;
    }
    if (out.requires_grad()) {
        Tape::current().record([x, out, rows, n]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            const float* py = out.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const float* yr = py + r * n;
                const float* gr = go.data() + r * n;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += static_cast<double>(gr[i]) * yr[i];
                for (int i = 0; i < n; ++i) {
                    gx[r * n + i] += static_cast<float>(yr[i] * (gr[i] - dot));
                }
            }
        });
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (eps <= 0.0f) throw ConfigError(cat("layernorm: eps must be positive, got ", eps));
    const int n = x.dim(-1);
    if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n) {
        throw ShapeError(cat("layernorm: gain/bias must be [", n, "], got ",
                             shape_str(gain.shape()), " and ", shape_str(bias.shape())));
    }
    const int64_t rows = x.numel() / n;
    bool rg = track_grad(x, gain) || track_grad(bias);
    Tensor out = make_tensor(x.shape(), rg);
    // normalized activations are kept for the backward pass
    std::vector<float> xhat(static_cast<size_t>(x.numel()));
    std::vector<float> inv_std(static_cast<size_t>(rows));
    const float* px = x.ptr();
    const float* pg = gain.ptr();
    const float* pb = bias.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * n;
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += xr[i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            double d = xr[i] - mean;
            var += d * d;
        }
        var /= n;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<float>(istd);
        for (int i = 0; i < n; ++i) {
            float h = static_cast<float>((xr[i] - mean) * istd);
            xhat[r * n + i] = h;
            po[r * n + i] = pg[i] * h + pb[i];
        }
    }
    if (out.requires_grad()) {
        auto xhat_s = std::make_shared<std::vector<float>>(std::move(xhat));
        auto istd_s = std::make_shared<std::vector<float>>(std::move(inv_std));
        Tape::current().record([x, gain, bias, out, xhat_s, istd_s, rows, n]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const float* pg = gain.ptr();
            const auto& xh = *xhat_s;
            for (int64_t r = 0; r < rows; ++r) {
                const float* gr = go.data() + r * n;
                const float* hr = xh.data() + r * n;
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int i = 0; i < n; ++i) {
                        double dh = static_cast<double>(gr[i]) * pg[i];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[i];
                    }
                    const double istd = (*istd_s)[r];
                    for (int i = 0; i < n; ++i) {
                        double dh = static_cast<double>(gr[i]) * pg[i];
                        gx[r * n + i] += static_cast<float>(
                            istd * (dh - sum_dh / n - hr[i] * sum_dh_h / n));
                    }
                }
                if (gain.requires_grad()) {
                    auto& gg = gain.grad();
                    for (int i = 0; i < n; ++i) gg[i] += gr[i] * hr[i];
                }
                if (bias.requires_grad()) {
                    auto& gb = bias.grad();
                    for (int i = 0; i < n; ++i) gb[i] += gr[i];
                }
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = make_tensor(x.shape(), track_grad(x));
    const int64_t n = x.numel();
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const float v = px[i];
        po[i] = 0.5f * v * (1.0f + std::erf(v * static_cast<float>(kInvSqrt2)));
    }
    if (out.requires_grad()) {
        Tape::current().record([x, out]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            const float* px2 = x.ptr();
            const int64_t n2 = out.numel();
            for (int64_t i = 0; i < n2; ++i) {
                const float v = px2[i];
                const float cdf = 0.5f * (1.0f + std::erf(v * static_cast<float>(kInvSqrt2)));
                const float pdf =
                    static_cast<float>(kInvSqrt2Pi) * std::exp(-0.5f * v * v);
                gx[i] += go[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
        throw ShapeError("attention_core: q/k/v must be rank 3 [B,S,D]");
    }
    const int b = q.dim(0), sq = q.dim(1), d = q.dim(2);
    const int sk = k.dim(1);
    if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != d || v.dim(2) != d || v.dim(1) != sk) {
        throw ShapeError(cat("attention_core: incompatible q ", shape_str(q.shape()), " k ",
                             shape_str(k.shape()), " v ", shape_str(v.shape())));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor out = make_tensor({b, sq, d}, track_grad(q, k) || track_grad(v));
    // attention weights are kept for backward; f32 is enough since backward
    // re-accumulates in double
    std::vector<float> weights;
    const bool keep = out.requires_grad();
    if (keep) weights.assign(static_cast<size_t>(b) * sq * sk, 0.0f);

    const float* pq = q.ptr();
    const float* pk = k.ptr();
    const float* pv = v.ptr();
    float* po = out.ptr();
    std::vector<double> row(static_cast<size_t>(sk));
    for (int bi = 0; bi < b; ++bi) {
        const float* qb = pq + static_cast<int64_t>(bi) * sq * d;
        const float* kb = pk + static_cast<int64_t>(bi) * sk * d;
        const float* vb = pv + static_cast<int64_t>(bi) * sk * d;
        float* ob = po + static_cast<int64_t>(bi) * sq * d;
        for (int i = 0; i < sq; ++i) {
            double m = -1e300;
            for (int j = 0; j < sk; ++j) {
                double s = 0.0;
                for (int c = 0; c < d; ++c) {
                    s += static_cast<double>(qb[i * d + c]) * kb[j * d + c];
                }
                s *= inv_sqrt_d;
                row[j] = s;
                m = std::max(m, s);
            }
            double sum = 0.0;
            for (int j = 0; j < sk; ++j) {
                row[j] = std::exp(row[j] - m);
                sum += row[j];
            }
            const double inv = 1.0 / sum;
            for (int j = 0; j < sk; ++j) row[j] *= inv;
            if (keep) {
                float* wr = weights.data() + (static_cast<int64_t>(bi) * sq + i) * sk;
                for (int j = 0; j < sk; ++j) wr[j] = static_cast<float>(row[j]);
            }
            for (int c = 0; c < d; ++c) {
                double acc = 0.0;
                for (int j = 0; j < sk; ++j) acc += row[j] * vb[j * d + c];
                ob[i * d + c] = static_cast<float>(acc);
            }
        }
    }

    if (keep) {
        auto w_s = std::make_shared<std::vector<float>>(std::move(weights));
        Tape::current().record([q, k, v, out, w_s, b, sq, sk, d, inv_sqrt_d]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            const float* pq2 = q.ptr();
            const float* pk2 = k.ptr();
            const float* pv2 = v.ptr();
            float* gq = q.requires_grad() ? q.grad().data() : nullptr;
            float* gk = k.requires_grad() ? k.grad().data() : nullptr;
            float* gv = v.requires_grad() ? v.grad().data() : nullptr;
            std::vector<double> dw(static_cast<size_t>(sk));
            std::vector<double> ds(static_cast<size_t>(sk));
            for (int bi = 0; bi < b; ++bi) {
                const float* qb = pq2 + static_cast<int64_t>(bi) * sq * d;
                const float* kb = pk2 + static_cast<int64_t>(bi) * sk * d;
                const float* vb = pv2 + static_cast<int64_t>(bi) * sk * d;
                const float* gob = go.data() + static_cast<int64_t>(bi) * sq * d;
                for (int i = 0; i < sq; ++i) {
                    const float* wr = w_s->data() + (static_cast<int64_t>(bi) * sq + i) * sk;
                    const float* gr = gob + i * d;
                    if (gv) {
                        for (int j = 0; j < sk; ++j) {
                            float* gvj = gv + (static_cast<int64_t>(bi) * sk + j) * d;
                            const double w = wr[j];
                            for (int c = 0; c < d; ++c) {
                                gvj[c] += static_cast<float>(w * gr[c]);
                            }
                        }
                    }
                    double dot_wdw = 0.0;
                    for (int j = 0; j < sk; ++j) {
                        double acc = 0.0;
                        for (int c = 0; c < d; ++c) {
                            acc += static_cast<double>(gr[c]) * vb[j * d + c];
                        }
                        dw[j] = acc;
                        dot_wdw += wr[j] * acc;
                    }
                    for (int j = 0; j < sk; ++j) ds[j] = wr[j] * (dw[j] - dot_wdw);
                    if (gq) {
                        float* gqi = gq + (static_cast<int64_t>(bi) * sq + i) * d;
                        for (int c = 0; c < d; ++c) {
                            double acc = 0.0;
                            for (int j = 0; j < sk; ++j) acc += ds[j] * kb[j * d + c];
                            gqi[c] += static_cast<float>(acc * inv_sqrt_d);
                        }
                    }
                    if (gk) {
                        for (int j = 0; j < sk; ++j) {
                            float* gkj = gk + (static_cast<int64_t>(bi) * sk + j) * d;
                            const double dsj = ds[j] * inv_sqrt_d;
                            const float* qi = qb + i * d;
                            for (int c = 0; c < d; ++c) {
                                gkj[c] += static_cast<float>(dsj * qi[c]);
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = make_tensor({1}, track_grad(x));
    double acc = 0.0;
    const float* px = x.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.ptr()[0] = static_cast<float>(acc);
    if (out.requires_grad()) {
        Tape::current().record([x, out]() {
            if (!out.has_grad()) return;
            const float g = out.grad()[0];
            auto& gx = x.grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    Tensor out = make_tensor({1}, track_grad(x));
    double acc = 0.0;
    const float* px = x.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.ptr()[0] = static_cast<float>(acc / static_cast<double>(n));
    if (out.requires_grad()) {
        Tape::current().record([x, out, n]() {
            if (!out.has_grad()) return;
            const float g = out.grad()[0] / static_cast<float>(n);
            auto& gx = x.grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor l2_normalize_lastdim(const Tensor& x) {
    const int n = x.dim(-1);
    const int64_t rows = x.numel() / n;
    Tensor out = make_tensor(x.shape(), track_grad(x));
    std::vector<float> inv_norm(static_cast<size_t>(rows));
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            double v = px[r * n + i];
            s += v * v;
        }
        const double inv = 1.0 / std::sqrt(std::max(s, 1e-30));
        inv_norm[r] = static_cast<float>(inv);
        for (int i = 0; i < n; ++i) po[r * n + i] = static_cast<float>(px[r * n + i] * inv);
    }
    if (out.requires_grad()) {
        auto inv_s = std::make_shared<std::vector<float>>(std::move(inv_norm));
        Tape::current().record([x, out, inv_s, rows, n]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            const float* px2 = x.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const double inv = (*inv_s)[r];
                double dot = 0.0;
                for (int i = 0; i < n; ++i) {
                    dot += static_cast<double>(go[r * n + i]) * px2[r * n + i];
                }
                const double inv3 = inv * inv * inv;
                for (int i = 0; i < n; ++i) {
                    gx[r * n + i] += static_cast<float>(go[r * n + i] * inv -
                                                        px2[r * n + i] * dot * inv3);
                }
            }
        });
    }
    return out;
}

Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
    if (x.rank() != 4) throw ShapeError("im2col: want [B,H,W,C]");
    if (stride <= 0 || kh <= 0 || kw <= 0 || pad < 0) throw ConfigError("im2col: bad geometry");
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("im2col: kernel larger than padded input");
    const int cols = kh * kw * c;
    Tensor out = make_tensor({b * ho * wo, cols}, track_grad(x));
    const float* px = x.ptr();
    float* po = out.ptr();
    int64_t row = 0;
    for (int bi = 0; bi < b; ++bi) {
        const float* img = px + static_cast<int64_t>(bi) * h * w * c;
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox, ++row) {
                float* dst = po + row * cols;
                int col = 0;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            const float* src = img + (static_cast<int64_t>(iy) * w + ix) * c;
                            std::copy(src, src + c, dst + col);
                        } else {
                            std::fill(dst + col, dst + col + c, 0.0f);
                        }
                        col += c;
                    }
                }
            }
        }
    }
    if (out.requires_grad()) {
        Tape::current().record([x, out, b, h, w, c, kh, kw, stride, pad, ho, wo]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            const int cols = kh * kw * c;
            int64_t row = 0;
            for (int bi = 0; bi < b; ++bi) {
                float* gimg = gx.data() + static_cast<int64_t>(bi) * h * w * c;
                for (int oy = 0; oy < ho; ++oy) {
                    for (int ox = 0; ox < wo; ++ox, ++row) {
                        const float* src = go.data() + row * cols;
                        int col = 0;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * stride + kx - pad;
                                if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                                    float* dst = gimg + (static_cast<int64_t>(iy) * w + ix) * c;
                                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[col + ch];
                                }
                                col += c;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 4) throw ShapeError("bilinear_upsample: want [B,h,w,C]");
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (out_h < h || out_w < w) throw ConfigError("bilinear_upsample: output smaller than input");

    auto axis_map = [](int in_n, int out_n) {
        std::vector<std::tuple<int, int, float>> m(static_cast<size_t>(out_n));
        const double scale = static_cast<double>(in_n) / out_n;
        for (int i = 0; i < out_n; ++i) {
            double s = (i + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
            int lo = static_cast<int>(std::floor(s));
            int hi = std::min(lo + 1, in_n - 1);
            m[i] = {lo, hi, static_cast<float>(s - lo)};
        }
        return m;
    };
    auto ymap = axis_map(h, out_h);
    auto xmap = axis_map(w, out_w);

    Tensor out = make_tensor({b, out_h, out_w, c}, track_grad(x));
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int bi = 0; bi < b; ++bi) {
        const float* img = px + static_cast<int64_t>(bi) * h * w * c;
        for (int oy = 0; oy < out_h; ++oy) {
            auto [y0, y1, ty] = ymap[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                auto [x0, x1, tx] = xmap[ox];
                float* dst = po + ((static_cast<int64_t>(bi) * out_h + oy) * out_w + ox) * c;
                const float* p00 = img + (static_cast<int64_t>(y0) * w + x0) * c;
                const float* p01 = img + (static_cast<int64_t>(y0) * w + x1) * c;
                const float* p10 = img + (static_cast<int64_t>(y1) * w + x0) * c;
                const float* p11 = img + (static_cast<int64_t>(y1) * w + x1) * c;
                for (int ch = 0; ch < c; ++ch) {
                    float top = p00[ch] + tx * (p01[ch] - p00[ch]);
                    float bot = p10[ch] + tx * (p11[ch] - p10[ch]);
                    dst[ch] = top + ty * (bot - top);
                }
            }
        }
    }
    if (out.requires_grad()) {
        Tape::current().record([x, out, ymap, xmap, b, h, w, c, out_h, out_w]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (int bi = 0; bi < b; ++bi) {
                float* gimg = gx.data() + static_cast<int64_t>(bi) * h * w * c;
                for (int oy = 0; oy < out_h; ++oy) {
                    auto [y0, y1, ty] = ymap[oy];
                    for (int ox = 0; ox < out_w; ++ox) {
                        auto [x0, x1, tx] = xmap[ox];
                        const float* src =
                            go.data() + ((static_cast<int64_t>(bi) * out_h + oy) * out_w + ox) * c;
                        float* g00 = gimg + (static_cast<int64_t>(y0) * w + x0) * c;
                        float* g01 = gimg + (static_cast<int64_t>(y0) * w + x1) * c;
                        float* g10 = gimg + (static_cast<int64_t>(y1) * w + x0) * c;
                        float* g11 = gimg + (static_cast<int64_t>(y1) * w + x1) * c;
                        const float w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx;
                        const float w10 = ty * (1 - tx), w11 = ty * tx;
                        for (int ch = 0; ch < c; ++ch) {
                            g00[ch] += w00 * src[ch];
                            g01[ch] += w01 * src[ch];
                            g10[ch] += w10 * src[ch];
                            g11[ch] += w11 * src[ch];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor expand_dim0(const Tensor& x, int b) {
    if (x.dim(0) != 1) throw ShapeError(cat("expand_dim0: leading dim must be 1, got ",
                                            shape_str(x.shape())));
    Shape out_shape = x.shape();
    out_shape[0] = b;
    Tensor out = make_tensor(out_shape, track_grad(x));
    const int64_t n = x.numel();
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int i = 0; i < b; ++i) std::copy(px, px + n, po + static_cast<int64_t>(i) * n);
    if (out.requires_grad()) {
        Tape::current().record([x, out, b, n]() {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (int i = 0; i < b; ++i) {
                const float* src = go.data() + static_cast<int64_t>(i) * n;
                for (int64_t j = 0; j < n; ++j) gx[j] += src[j];
            }
        });
    }
    return out;
}

}  // namespace unips
