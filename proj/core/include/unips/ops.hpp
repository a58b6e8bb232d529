#pragma once

#include <vector>

#include "unips/tensor.hpp"

namespace unips {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

// 2-D matrix product [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// [B,M,K] x [B,K,N] -> [B,M,N].
Tensor batched_matmul(const Tensor& a, const Tensor& b);

// a [B,M,K] x b [B,N,K] transposed on the last two axes -> [B,M,N];
// avoids materializing the transpose (attention scores).
Tensor batched_matmul_nt(const Tensor& a, const Tensor& b);

// x [..., in] * w [in, out] (+ bias [out]) -> [..., out]. Leading dims are
// treated as rows; this is the workhorse behind every projection.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add_bias_lastdim(const Tensor& x, const Tensor& bias);

Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, const Shape& shape);

// Concatenation along the last axis; leading dims must match.
Tensor concat_lastdim(const Tensor& a, const Tensor& b);

// x [A,S,C], indices into S -> [A,|idx|,C].
Tensor gather_dim1(const Tensor& x, const std::vector<int>& indices);

Tensor softmax_lastdim(const Tensor& x);

// Per-row normalization over the last axis, then affine by gain/bias [n].
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

Tensor gelu(const Tensor& x);

// Scaled dot-product attention core on per-head tensors q [B,Sq,D],
// k/v [B,Sk,D] -> [B,Sq,D]. Reductions over Sk run in double so the result
// is stable under reordering of the Sk axis (the light/image axis).
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Rows scaled to unit Euclidean norm over the last axis.
Tensor l2_normalize_lastdim(const Tensor& x);

// x [B,H,W,C] -> patches [B*Ho*Wo, kh*kw*C] with zero padding.
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad);

// x [B,h,w,C] -> [B,H,W,C], bilinear, half-pixel centers.
Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w);

// x [1, ...] -> [B, ...] by tiling; gradient sums over the tiles.
Tensor expand_dim0(const Tensor& x, int b);

}  // namespace unips
