#pragma once

// Double-precision reference implementations used as independent gradient
// oracles. Written against the math, not the production code: plain loops
// over std::vector<double>, no tape, no BLAS.

#include <cmath>
#include <vector>

#include "unips/tensor.hpp"

namespace unips::testing::ref {

using dvec = std::vector<double>;

inline dvec to_d(const Tensor& t) {
    dvec v(static_cast<size_t>(t.numel()));
    for (size_t i = 0; i < v.size(); ++i) v[i] = t.ptr()[i];
    return v;
}

// [m,k] x [k,n]
inline dvec matmul(const dvec& a, const dvec& b, int m, int k, int n) {
    dvec c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
    }
    return c;
}

// rows x in -> rows x out, bias optional (empty = none)
inline dvec linear(const dvec& x, const dvec& w, const dvec& b, int rows, int in, int out) {
    dvec y = matmul(x, w, rows, in, out);
    if (!b.empty()) {
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < out; ++c) y[r * out + c] += b[c];
        }
    }
    return y;
}

inline dvec layernorm(const dvec& x, const dvec& gain, const dvec& bias, int rows, int n,
                      double eps) {
    dvec y(x.size());
    for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += x[r * n + i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            const double d = x[r * n + i] - mean;
            var += d * d;
        }
        var /= n;
        const double istd = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < n; ++i) {
            y[r * n + i] = gain[i] * (x[r * n + i] - mean) * istd + bias[i];
        }
    }
    return y;
}

inline void softmax_rows(dvec& x, int rows, int n) {
    for (int r = 0; r < rows; ++r) {
        double m = x[r * n];
        for (int i = 1; i < n; ++i) m = std::max(m, x[r * n + i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            x[r * n + i] = std::exp(x[r * n + i] - m);
            sum += x[r * n + i];
        }
        for (int i = 0; i < n; ++i) x[r * n + i] /= sum;
    }
}

inline dvec gelu(const dvec& x) {
    dvec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0)));
    }
    return y;
}

inline dvec l2_normalize_rows(const dvec& x, int rows, int n) {
    dvec y(x.size());
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += x[r * n + i] * x[r * n + i];
        const double inv = 1.0 / std::sqrt(std::max(s, 1e-30));
        for (int i = 0; i < n; ++i) y[r * n + i] = x[r * n + i] * inv;
    }
    return y;
}

// Multi-head attention over q [b,sq,d], k/v [b,sk,d] with projection
// weights as in AttentionLayer (no bias on the key projection).
struct MhaWeights {
    dvec wq, bq, wk, wv, bv, wo, bo;
};

inline dvec mha(const dvec& q_in, const dvec& k_in, const dvec& v_in, int b, int sq, int sk,
                int d, int heads, const MhaWeights& w) {
    const int dh = d / heads;
    dvec q = linear(q_in, w.wq, w.bq, b * sq, d, d);
    dvec k = linear(k_in, w.wk, {}, b * sk, d, d);
    dvec v = linear(v_in, w.wv, w.bv, b * sk, d, d);

    dvec mixed(static_cast<size_t>(b) * sq * d, 0.0);
    dvec scores(static_cast<size_t>(sk));
    for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < sq; ++i) {
                for (int j = 0; j < sk; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) {
                        acc += q[(bi * sq + i) * d + h * dh + c] *
                               k[(bi * sk + j) * d + h * dh + c];
                    }
                    scores[j] = acc / std::sqrt(static_cast<double>(dh));
                }
                softmax_rows(scores, 1, sk);
                for (int c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int j = 0; j < sk; ++j) {
                        acc += scores[j] * v[(bi * sk + j) * d + h * dh + c];
                    }
                    mixed[(bi * sq + i) * d + h * dh + c] = acc;
                }
            }
        }
    }
    return linear(mixed, w.wo, w.bo, b * sq, d, d);
}

// Pre-norm residual transformer block matching TransformerBlock.
struct BlockWeights {
    dvec ln1_g, ln1_b, ln2_g, ln2_b;
    MhaWeights attn;
    dvec fc1_w, fc1_b, fc2_w, fc2_b;
    int mlp_hidden = 0;
};

inline dvec block(const dvec& x, int b, int s, int d, int heads, const BlockWeights& w,
                  double ln_eps = 1e-5) {
    dvec h = layernorm(x, w.ln1_g, w.ln1_b, b * s, d, ln_eps);
    dvec attn_out = mha(h, h, h, b, s, s, d, heads, w.attn);
    dvec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + attn_out[i];
    dvec h2 = layernorm(y, w.ln2_g, w.ln2_b, b * s, d, ln_eps);
    dvec m1 = gelu(linear(h2, w.fc1_w, w.fc1_b, b * s, d, w.mlp_hidden));
    dvec m2 = linear(m1, w.fc2_w, w.fc2_b, b * s, w.mlp_hidden, d);
    for (size_t i = 0; i < y.size(); ++i) y[i] += m2[i];
    return y;
}

}  // namespace unips::testing::ref
