#pragma once

#include <memory>
#include <vector>

#include "atcon/autodiff.hpp"

/// Differentiable operations over Vars. All inputs must live on the same tape.
/// Tensors are single samples: feature maps are [C,H,W], maps are [H,W].
namespace atcon::ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, Real factor);
Var add_scalar(const Var& x, Real offset);
/// x * c with c a constant tensor of the same shape (gating masks, signs).
Var mul_const(const Var& x, std::shared_ptr<const Tensor> c);

Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var abs(const Var& x);
Var relu(const Var& x);
Var clamp_min(const Var& x, Real lo);

// Reductions and broadcast of scalars ([1] tensors).
Var sum(const Var& x);
Var mean(const Var& x);
Var expand(const Var& s, const Shape& shape);
Var reshape(const Var& x, Shape shape);

/// Fixed sparse linear operator: out[r] = sum_k weight[k] * in[col[k]].
struct SparseMap {
  Shape in_shape;
  Shape out_shape;
  std::vector<int> row_start;  // out_size + 1 entries
  std::vector<int> cols;
  std::vector<Real> weights;
};

/// Applies `map` (or its transpose) to x.
Var sparse_apply(const Var& x, std::shared_ptr<const SparseMap> map, bool transpose = false);
/// Picks x[index] as a [1] tensor.
Var select(const Var& x, int index);
Var max_all(const Var& x);
Var min_all(const Var& x);

// Convolution family. These three ops are closed under differentiation.
Var conv2d(const Var& x, const Var& w, const Var* bias, int stride, int pad);
Var conv2d_input_grad(const Var& g, const Var& w, int in_h, int in_w, int stride, int pad);
Var conv2d_weight_grad(const Var& x, const Var& g, int kernel, int stride, int pad);

/// 2x2-style max pooling; ties go to the first element in row-major order.
Var maxpool2d(const Var& x, int window, int stride);
/// Adaptive max pooling of a [H,W] map down to [out_h,out_w].
Var adaptive_maxpool2d(const Var& map, int out_h, int out_w);
/// Bilinear resampling of a [H,W] map (half-pixel centres, edge clamped).
Var upsample_bilinear(const Var& map, int out_h, int out_w);
/// Normalised 3x3 box filter on a [H,W] map (border windows average their valid cells).
Var box_filter3(const Var& map);

// Channel plumbing for [C,H,W] tensors.
Var channel_sum_spatial(const Var& x);                  // [C,H,W] -> [C]
Var channel_expand_spatial(const Var& v, int h, int w);  // [C] -> [C,H,W]
Var sum_channels(const Var& x);                         // [C,H,W] -> [H,W]
Var expand_channels(const Var& map, int channels);       // [H,W] -> [C,H,W]
Var weighted_channel_sum(const Var& f, const Var& alpha);  // sum_k alpha_k f_k -> [H,W]
Var channel_outer(const Var& alpha, const Var& map);       // alpha_k * map -> [K,H,W]
Var channel_dot(const Var& f, const Var& map);             // <f_k, map> -> [K]
/// max_c x[c,i,j] per position, ties to the lowest channel.
Var channel_max(const Var& x);

Var global_avg_pool(const Var& x);  // [C,H,W] -> [C]

// Dense layer pieces.
Var matvec(const Var& w, const Var& x);    // [R,K]·[K] -> [R]
Var matvec_t(const Var& w, const Var& g);  // [R,K]^T·[R] -> [K]
Var outer(const Var& g, const Var& x);     // [R]x[K] -> [R,K]
Var linear(const Var& x, const Var& w, const Var& b);

Var logsumexp(const Var& x);
Var softmax(const Var& x);

}  // namespace atcon::ops
