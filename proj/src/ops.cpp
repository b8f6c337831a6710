#include "atcon/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "atcon/errors.hpp"

namespace atcon::ops {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  Tensor y(x.shape());
  auto src = x.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return y;
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f) {
  Tensor y(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return y;
}

Tape& tape_of(const Var& v) { return v.tape(); }

// ---- convolution kernels --------------------------------------------------

struct ConvGeom {
  int channels_in, in_h, in_w, channels_out, kernel, stride, pad, out_h, out_w;
};

// Range of output indices j with 0 <= j*stride + q - pad < extent.
inline void valid_range(int q, int pad, int stride, int extent, int out, int& lo, int& hi) {
  const int off = q - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int last = extent - 1 - off;
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor* b, const ConvGeom& g) {
  Tensor y(Shape{g.channels_out, g.out_h, g.out_w});
  const Real* xp = x.data().data();
  const Real* wp = w.data().data();
  Real* yp = y.data().data();
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int o = 0; o < g.channels_out; ++o) {
    Real* yo = yp + o * plane;
    if (b) std::fill(yo, yo + plane, (*b)[static_cast<std::size_t>(o)]);
    for (int c = 0; c < g.channels_in; ++c) {
      const Real* xc = xp + static_cast<std::size_t>(c) * g.in_h * g.in_w;
      for (int p = 0; p < g.kernel; ++p) {
        int ilo, ihi;
        valid_range(p, g.pad, g.stride, g.in_h, g.out_h, ilo, ihi);
        for (int q = 0; q < g.kernel; ++q) {
          const Real wv = wp[((static_cast<std::size_t>(o) * g.channels_in + c) * g.kernel + p) * g.kernel + q];
          int jlo, jhi;
          valid_range(q, g.pad, g.stride, g.in_w, g.out_w, jlo, jhi);
          for (int i = ilo; i < ihi; ++i) {
            const Real* xr = xc + static_cast<std::size_t>(i * g.stride + p - g.pad) * g.in_w + (q - g.pad);
            Real* yr = yo + static_cast<std::size_t>(i) * g.out_w;
            for (int j = jlo; j < jhi; ++j) yr[j] += wv * xr[j * g.stride];
          }
        }
      }
    }
  }
  return y;
}

Tensor conv_input_grad(const Tensor& gy, const Tensor& w, const ConvGeom& g) {
  Tensor gx(Shape{g.channels_in, g.in_h, g.in_w});
  const Real* gp = gy.data().data();
  const Real* wp = w.data().data();
  Real* xp = gx.data().data();
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int o = 0; o < g.channels_out; ++o) {
    const Real* go = gp + o * plane;
    for (int c = 0; c < g.channels_in; ++c) {
      Real* xc = xp + static_cast<std::size_t>(c) * g.in_h * g.in_w;
      for (int p = 0; p < g.kernel; ++p) {
        int ilo, ihi;
        valid_range(p, g.pad, g.stride, g.in_h, g.out_h, ilo, ihi);
        for (int q = 0; q < g.kernel; ++q) {
          const Real wv = wp[((static_cast<std::size_t>(o) * g.channels_in + c) * g.kernel + p) * g.kernel + q];
          int jlo, jhi;
          valid_range(q, g.pad, g.stride, g.in_w, g.out_w, jlo, jhi);
          for (int i = ilo; i < ihi; ++i) {
            Real* xr = xc + static_cast<std::size_t>(i * g.stride + p - g.pad) * g.in_w + (q - g.pad);
            const Real* gr = go + static_cast<std::size_t>(i) * g.out_w;
            for (int j = jlo; j < jhi; ++j) xr[j * g.stride] += wv * gr[j];
          }
        }
      }
    }
  }
  return gx;
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& gy, const ConvGeom& g) {
  Tensor gw(Shape{g.channels_out, g.channels_in, g.kernel, g.kernel});
  const Real* xp = x.data().data();
  const Real* gp = gy.data().data();
  Real* wp = gw.data().data();
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int o = 0; o < g.channels_out; ++o) {
    const Real* go = gp + o * plane;
    for (int c = 0; c < g.channels_in; ++c) {
      const Real* xc = xp + static_cast<std::size_t>(c) * g.in_h * g.in_w;
      for (int p = 0; p < g.kernel; ++p) {
        int ilo, ihi;
        valid_range(p, g.pad, g.stride, g.in_h, g.out_h, ilo, ihi);
        for (int q = 0; q < g.kernel; ++q) {
          int jlo, jhi;
          valid_range(q, g.pad, g.stride, g.in_w, g.out_w, jlo, jhi);
          double acc = 0.0;
          for (int i = ilo; i < ihi; ++i) {
            const Real* xr = xc + static_cast<std::size_t>(i * g.stride + p - g.pad) * g.in_w + (q - g.pad);
            const Real* gr = go + static_cast<std::size_t>(i) * g.out_w;
            Real row = 0.0f;
            for (int j = jlo; j < jhi; ++j) row += gr[j] * xr[j * g.stride];
            acc += row;
          }
          wp[((static_cast<std::size_t>(o) * g.channels_in + c) * g.kernel + p) * g.kernel + q] =
              static_cast<Real>(acc);
        }
      }
    }
  }
  return gw;
}

ConvGeom conv_geometry(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 3) throw DimensionError("conv2d: input must be [C,H,W], got " + shape_string(x));
  if (w.size() != 4 || w[2] != w[3]) {
    throw DimensionError("conv2d: weight must be [O,C,k,k], got " + shape_string(w));
  }
  if (w[1] != x[0]) throw DimensionError("conv2d: channel mismatch " + shape_string(x) + " vs " + shape_string(w));
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
  const int k = w[2];
  if (k > x[1] + 2 * pad || k > x[2] + 2 * pad) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_string(x));
  }
  return ConvGeom{x[0], x[1], x[2], w[0], k, stride, pad, (x[1] + 2 * pad - k) / stride + 1,
                  (x[2] + 2 * pad - k) / stride + 1};
}

std::shared_ptr<const Tensor> make_mask(const Tensor& x, auto pred) {
  return std::make_shared<const Tensor>(unary(x, [&](Real v) { return pred(v) ? 1.0f : 0.0f; }));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return tape_of(a).record(binary(a.value(), b.value(), [](Real x, Real y) { return x + y; }), {a, b},
                           [](BackwardContext& ctx) {
                             ctx.grads[0] = ctx.upstream;
                             ctx.grads[1] = ctx.upstream;
                           });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return tape_of(a).record(binary(a.value(), b.value(), [](Real x, Real y) { return x - y; }), {a, b},
                           [](BackwardContext& ctx) {
                             if (ctx.needs[0]) ctx.grads[0] = ctx.upstream;
                             if (ctx.needs[1]) ctx.grads[1] = neg(ctx.upstream);
                           });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return tape_of(a).record(binary(a.value(), b.value(), [](Real x, Real y) { return x * y; }), {a, b},
                           [a, b](BackwardContext& ctx) {
                             if (ctx.needs[0]) ctx.grads[0] = mul(ctx.upstream, b);
                             if (ctx.needs[1]) ctx.grads[1] = mul(ctx.upstream, a);
                           });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  return tape_of(a).record(binary(a.value(), b.value(), [](Real x, Real y) { return x / y; }), {a, b},
                           [b](BackwardContext& ctx) {
                             if (ctx.needs[0]) ctx.grads[0] = div(ctx.upstream, b);
                             if (ctx.needs[1]) ctx.grads[1] = neg(mul(ctx.upstream, div(ctx.output, b)));
                           });
}

Var neg(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return -v; }), {x},
                           [](BackwardContext& ctx) { ctx.grads[0] = neg(ctx.upstream); });
}

Var scale(const Var& x, Real factor) {
  return tape_of(x).record(unary(x.value(), [factor](Real v) { return v * factor; }), {x},
                           [factor](BackwardContext& ctx) { ctx.grads[0] = scale(ctx.upstream, factor); });
}

Var add_scalar(const Var& x, Real offset) {
  return tape_of(x).record(unary(x.value(), [offset](Real v) { return v + offset; }), {x},
                           [](BackwardContext& ctx) { ctx.grads[0] = ctx.upstream; });
}

Var mul_const(const Var& x, std::shared_ptr<const Tensor> c) {
  if (c->shape() != x.shape()) {
    throw DimensionError("mul_const: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(c->shape()));
  }
  return tape_of(x).record(binary(x.value(), *c, [](Real v, Real m) { return v * m; }), {x},
                           [c](BackwardContext& ctx) { ctx.grads[0] = mul_const(ctx.upstream, c); });
}

Var exp(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return std::exp(v); }), {x},
                           [](BackwardContext& ctx) { ctx.grads[0] = mul(ctx.upstream, ctx.output); });
}

Var log(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return std::log(v); }), {x},
                           [x](BackwardContext& ctx) { ctx.grads[0] = div(ctx.upstream, x); });
}

Var sqrt(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return std::sqrt(v); }), {x},
                           [](BackwardContext& ctx) { ctx.grads[0] = div(ctx.upstream, scale(ctx.output, 2.0f)); });
}

Var square(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return v * v; }), {x},
                           [x](BackwardContext& ctx) { ctx.grads[0] = mul(ctx.upstream, scale(x, 2.0f)); });
}

Var sigmoid(const Var& x) {
  auto f = [](Real v) {
    if (v >= 0) return 1.0f / (1.0f + std::exp(-v));
    const Real e = std::exp(v);
    return e / (1.0f + e);
  };
  return tape_of(x).record(unary(x.value(), f), {x}, [](BackwardContext& ctx) {
    const Var& y = ctx.output;
    ctx.grads[0] = mul(ctx.upstream, mul(y, add_scalar(neg(y), 1.0f)));
  });
}

Var softplus(const Var& x) {
  auto f = [](Real v) { return std::max<Real>(v, 0) + std::log1p(std::exp(-std::fabs(v))); };
  return tape_of(x).record(unary(x.value(), f), {x},
                           [x](BackwardContext& ctx) { ctx.grads[0] = mul(ctx.upstream, sigmoid(x)); });
}

Var abs(const Var& x) {
  auto sign = std::make_shared<const Tensor>(
      unary(x.value(), [](Real v) { return v > 0 ? 1.0f : (v < 0 ? -1.0f : 0.0f); }));
  return tape_of(x).record(unary(x.value(), [](Real v) { return std::fabs(v); }), {x},
                           [sign](BackwardContext& ctx) { ctx.grads[0] = mul_const(ctx.upstream, sign); });
}

Var relu(const Var& x) {
  return tape_of(x).record(unary(x.value(), [](Real v) { return v > 0 ? v : 0.0f; }), {x},
                           [x](BackwardContext& ctx) {
                             const Tensor& in = x.value();
                             if (x.tape().relu_backward_mode() == ReluBackward::guided) {
                               const Tensor& up = ctx.upstream.value();
                               auto gate = std::make_shared<const Tensor>(
                                   binary(in, up, [](Real v, Real g) { return (v > 0 && g > 0) ? 1.0f : 0.0f; }));
                               ctx.grads[0] = mul_const(ctx.upstream, gate);
                             } else {
                               ctx.grads[0] = mul_const(ctx.upstream, make_mask(in, [](Real v) { return v > 0; }));
                             }
                           });
}

Var clamp_min(const Var& x, Real lo) {
  auto pass = make_mask(x.value(), [lo](Real v) { return v > lo; });
  return tape_of(x).record(unary(x.value(), [lo](Real v) { return v > lo ? v : lo; }), {x},
                           [pass](BackwardContext& ctx) { ctx.grads[0] = mul_const(ctx.upstream, pass); });
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& x) {
  double acc = 0.0;
  for (Real v : x.value().data()) acc += v;
  const Shape shape = x.shape();
  return tape_of(x).record(Tensor::scalar(static_cast<Real>(acc)), {x},
                           [shape](BackwardContext& ctx) { ctx.grads[0] = expand(ctx.upstream, shape); });
}

Var mean(const Var& x) { return scale(sum(x), 1.0f / static_cast<Real>(x.size())); }

Var expand(const Var& s, const Shape& shape) {
  if (s.size() != 1) throw DimensionError("expand: source must hold one value, got " + shape_string(s.shape()));
  return tape_of(s).record(Tensor(shape, s.value()[0]), {s},
                           [](BackwardContext& ctx) { ctx.grads[0] = sum(ctx.upstream); });
}

Var reshape(const Var& x, Shape shape) {
  const Shape original = x.shape();
  return tape_of(x).record(x.value().reshaped(std::move(shape)), {x},
                           [original](BackwardContext& ctx) { ctx.grads[0] = reshape(ctx.upstream, original); });
}

// ---- sparse linear maps ----------------------------------------------------

Var sparse_apply(const Var& x, std::shared_ptr<const SparseMap> map, bool transpose) {
  const Shape& expect = transpose ? map->out_shape : map->in_shape;
  if (x.shape() != expect) {
    throw DimensionError("sparse_apply: expected " + shape_string(expect) + ", got " + shape_string(x.shape()));
  }
  const auto& src = x.value();
  Tensor y(transpose ? map->in_shape : map->out_shape);
  const std::size_t rows = map->row_start.size() - 1;
  for (std::size_t r = 0; r < rows; ++r) {
    for (int k = map->row_start[r]; k < map->row_start[r + 1]; ++k) {
      const auto col = static_cast<std::size_t>(map->cols[static_cast<std::size_t>(k)]);
      const Real w = map->weights[static_cast<std::size_t>(k)];
      if (transpose) {
        y[col] += w * src[r];
      } else {
        y[r] += w * src[col];
      }
    }
  }
  return tape_of(x).record(std::move(y), {x}, [map, transpose](BackwardContext& ctx) {
    ctx.grads[0] = sparse_apply(ctx.upstream, map, !transpose);
  });
}

namespace {

std::shared_ptr<SparseMap> gather_map(Shape in, Shape out, const std::vector<int>& picks) {
  auto m = std::make_shared<SparseMap>();
  m->in_shape = std::move(in);
  m->out_shape = std::move(out);
  m->row_start.resize(picks.size() + 1);
  for (std::size_t r = 0; r <= picks.size(); ++r) m->row_start[r] = static_cast<int>(r);
  m->cols = picks;
  m->weights.assign(picks.size(), 1.0f);
  return m;
}

}  // namespace

Var select(const Var& x, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= x.size()) throw DimensionError("select: index out of range");
  return sparse_apply(x, gather_map(x.shape(), Shape{1}, {index}));
}

Var max_all(const Var& x) {
  auto d = x.value().data();
  return select(x, static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin()));
}

Var min_all(const Var& x) {
  auto d = x.value().data();
  return select(x, static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin()));
}

// ---- convolution -----------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var* bias, int stride, int pad) {
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), stride, pad);
  if (bias && bias->shape() != Shape{g.channels_out}) {
    throw DimensionError("conv2d: bias shape " + shape_string(bias->shape()) + " does not match output channels");
  }
  Tensor y = conv_forward(x.value(), w.value(), bias ? &bias->value() : nullptr, g);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return tape_of(x).record(std::move(y), std::move(inputs), [x, w, g](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = conv2d_input_grad(ctx.upstream, w, g.in_h, g.in_w, g.stride, g.pad);
    if (ctx.needs[1]) ctx.grads[1] = conv2d_weight_grad(x, ctx.upstream, g.kernel, g.stride, g.pad);
    if (ctx.needs.size() > 2 && ctx.needs[2]) ctx.grads[2] = channel_sum_spatial(ctx.upstream);
  });
}

Var conv2d_input_grad(const Var& gy, const Var& w, int in_h, int in_w, int stride, int pad) {
  const Shape& ws = w.shape();
  const ConvGeom g = conv_geometry(Shape{ws.at(1), in_h, in_w}, ws, stride, pad);
  if (gy.shape() != Shape{g.channels_out, g.out_h, g.out_w}) {
    throw DimensionError("conv2d_input_grad: gradient shape " + shape_string(gy.shape()) + " inconsistent");
  }
  Tensor gx = conv_input_grad(gy.value(), w.value(), g);
  return tape_of(gy).record(std::move(gx), {gy, w}, [gy, w, g](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = conv2d(ctx.upstream, w, nullptr, g.stride, g.pad);
    if (ctx.needs[1]) ctx.grads[1] = conv2d_weight_grad(ctx.upstream, gy, g.kernel, g.stride, g.pad);
  });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, int kernel, int stride, int pad) {
  const Shape& xs = x.shape();
  if (gy.value().rank() != 3) throw DimensionError("conv2d_weight_grad: gradient must be [O,H,W]");
  const ConvGeom g = conv_geometry(xs, Shape{gy.shape()[0], xs.at(0), kernel, kernel}, stride, pad);
  if (gy.shape() != Shape{g.channels_out, g.out_h, g.out_w}) {
    throw DimensionError("conv2d_weight_grad: gradient shape " + shape_string(gy.shape()) + " inconsistent");
  }
  Tensor gw = conv_weight_grad(x.value(), gy.value(), g);
  return tape_of(x).record(std::move(gw), {x, gy}, [x, gy, g](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = conv2d_input_grad(gy, ctx.upstream, g.in_h, g.in_w, g.stride, g.pad);
    if (ctx.needs[1]) ctx.grads[1] = conv2d(x, ctx.upstream, nullptr, g.stride, g.pad);
  });
}

// ---- pooling and resampling ------------------------------------------------

Var maxpool2d(const Var& x, int window, int stride) {
  require_rank(x, 3, "maxpool2d");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (window < 1 || stride < 1 || window > h || window > w) throw DimensionError("maxpool2d: bad window");
  const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const auto& v = x.value();
  std::vector<int> picks;
  picks.reserve(static_cast<std::size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        int best = (ch * h + i * stride) * w + j * stride;
        for (int p = 0; p < window; ++p) {
          for (int q = 0; q < window; ++q) {
            const int idx = (ch * h + i * stride + p) * w + j * stride + q;
            if (v[static_cast<std::size_t>(idx)] > v[static_cast<std::size_t>(best)]) best = idx;
          }
        }
        picks.push_back(best);
      }
    }
  }
  return sparse_apply(x, gather_map(x.shape(), Shape{c, oh, ow}, picks));
}

Var adaptive_maxpool2d(const Var& map, int out_h, int out_w) {
  require_rank(map, 2, "adaptive_maxpool2d");
  const int h = map.shape()[0], w = map.shape()[1];
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) throw DimensionError("adaptive_maxpool2d: bad output size");
  const auto& v = map.value();
  std::vector<int> picks;
  for (int i = 0; i < out_h; ++i) {
    const int r0 = i * h / out_h, r1 = ((i + 1) * h + out_h - 1) / out_h;
    for (int j = 0; j < out_w; ++j) {
      const int c0 = j * w / out_w, c1 = ((j + 1) * w + out_w - 1) / out_w;
      int best = r0 * w + c0;
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
          if (v[static_cast<std::size_t>(r * w + c)] > v[static_cast<std::size_t>(best)]) best = r * w + c;
        }
      }
      picks.push_back(best);
    }
  }
  return sparse_apply(map, gather_map(map.shape(), Shape{out_h, out_w}, picks));
}

Var upsample_bilinear(const Var& map, int out_h, int out_w) {
  require_rank(map, 2, "upsample_bilinear");
  const int h = map.shape()[0], w = map.shape()[1];
  if (out_h < 1 || out_w < 1) throw DimensionError("upsample_bilinear: bad output size");
  auto axis = [](int dst, int in, int out, int& i0, int& i1, Real& frac) {
    Real src = (static_cast<Real>(dst) + 0.5f) * static_cast<Real>(in) / static_cast<Real>(out) - 0.5f;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<int>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<Real>(i0);
  };
  auto m = std::make_shared<SparseMap>();
  m->in_shape = map.shape();
  m->out_shape = Shape{out_h, out_w};
  m->row_start.push_back(0);
  for (int i = 0; i < out_h; ++i) {
    int r0, r1;
    Real fr;
    axis(i, h, out_h, r0, r1, fr);
    for (int j = 0; j < out_w; ++j) {
      int c0, c1;
      Real fc;
      axis(j, w, out_w, c0, c1, fc);
      const int cols[4] = {r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1};
      const Real wts[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
      for (int k = 0; k < 4; ++k) {
        m->cols.push_back(cols[k]);
        m->weights.push_back(wts[k]);
      }
      m->row_start.push_back(static_cast<int>(m->cols.size()));
    }
  }
  return sparse_apply(map, m);
}

Var box_filter3(const Var& map) {
  require_rank(map, 2, "box_filter3");
  const int h = map.shape()[0], w = map.shape()[1];
  auto m = std::make_shared<SparseMap>();
  m->in_shape = map.shape();
  m->out_shape = map.shape();
  m->row_start.push_back(0);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int r0 = std::max(0, i - 1), r1 = std::min(h - 1, i + 1);
      const int c0 = std::max(0, j - 1), c1 = std::min(w - 1, j + 1);
      const Real wt = 1.0f / static_cast<Real>((r1 - r0 + 1) * (c1 - c0 + 1));
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          m->cols.push_back(r * w + c);
          m->weights.push_back(wt);
        }
      }
      m->row_start.push_back(static_cast<int>(m->cols.size()));
    }
  }
  return sparse_apply(map, m);
}

// ---- channel plumbing ------------------------------------------------------

Var channel_sum_spatial(const Var& x) {
  require_rank(x, 3, "channel_sum_spatial");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{c});
  auto src = x.value().data();
  for (int k = 0; k < c; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += src[k * plane + i];
    y[static_cast<std::size_t>(k)] = static_cast<Real>(acc);
  }
  return tape_of(x).record(std::move(y), {x},
                           [h, w](BackwardContext& ctx) { ctx.grads[0] = channel_expand_spatial(ctx.upstream, h, w); });
}

Var channel_expand_spatial(const Var& v, int h, int w) {
  require_rank(v, 1, "channel_expand_spatial");
  const int c = v.shape()[0];
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{c, h, w});
  for (int k = 0; k < c; ++k) {
    std::fill_n(y.data().begin() + static_cast<std::ptrdiff_t>(k * plane), plane, v.value()[static_cast<std::size_t>(k)]);
  }
  return tape_of(v).record(std::move(y), {v},
                           [](BackwardContext& ctx) { ctx.grads[0] = channel_sum_spatial(ctx.upstream); });
}

Var sum_channels(const Var& x) {
  require_rank(x, 3, "sum_channels");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{h, w});
  auto src = x.value().data();
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < plane; ++i) y[i] += src[k * plane + i];
  }
  return tape_of(x).record(std::move(y), {x},
                           [c](BackwardContext& ctx) { ctx.grads[0] = expand_channels(ctx.upstream, c); });
}

Var expand_channels(const Var& map, int channels) {
  require_rank(map, 2, "expand_channels");
  const int h = map.shape()[0], w = map.shape()[1];
  Tensor y(Shape{channels, h, w});
  const auto plane = static_cast<std::size_t>(h) * w;
  for (int k = 0; k < channels; ++k) {
    std::copy(map.value().data().begin(), map.value().data().end(),
              y.data().begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  return tape_of(map).record(std::move(y), {map},
                             [](BackwardContext& ctx) { ctx.grads[0] = sum_channels(ctx.upstream); });
}

Var weighted_channel_sum(const Var& f, const Var& alpha) {
  require_rank(f, 3, "weighted_channel_sum");
  const int k = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
  if (alpha.shape() != Shape{k}) throw DimensionError("weighted_channel_sum: weights do not match channels");
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{h, w});
  auto src = f.value().data();
  for (int c = 0; c < k; ++c) {
    const Real a = alpha.value()[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) y[i] += a * src[c * plane + i];
  }
  return tape_of(f).record(std::move(y), {f, alpha}, [f, alpha](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = channel_outer(alpha, ctx.upstream);
    if (ctx.needs[1]) ctx.grads[1] = channel_dot(f, ctx.upstream);
  });
}

Var channel_outer(const Var& alpha, const Var& map) {
  require_rank(alpha, 1, "channel_outer");
  require_rank(map, 2, "channel_outer");
  const int k = alpha.shape()[0], h = map.shape()[0], w = map.shape()[1];
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{k, h, w});
  auto m = map.value().data();
  for (int c = 0; c < k; ++c) {
    const Real a = alpha.value()[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] = a * m[i];
  }
  return tape_of(alpha).record(std::move(y), {alpha, map}, [alpha, map](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = channel_dot(ctx.upstream, map);
    if (ctx.needs[1]) ctx.grads[1] = weighted_channel_sum(ctx.upstream, alpha);
  });
}

Var channel_dot(const Var& f, const Var& map) {
  require_rank(f, 3, "channel_dot");
  const int k = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
  if (map.shape() != Shape{h, w}) throw DimensionError("channel_dot: map does not match feature plane");
  const auto plane = static_cast<std::size_t>(h) * w;
  Tensor y(Shape{k});
  auto src = f.value().data();
  auto m = map.value().data();
  for (int c = 0; c < k; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += src[c * plane + i] * m[i];
    y[static_cast<std::size_t>(c)] = static_cast<Real>(acc);
  }
  return tape_of(f).record(std::move(y), {f, map}, [f, map](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = channel_outer(ctx.upstream, map);
    if (ctx.needs[1]) ctx.grads[1] = weighted_channel_sum(f, ctx.upstream);
  });
}

Var channel_max(const Var& x) {
  require_rank(x, 3, "channel_max");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto plane = static_cast<std::size_t>(h) * w;
  const auto& v = x.value();
  std::vector<int> picks(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = i;
    for (int k = 1; k < c; ++k) {
      if (v[k * plane + i] > v[best]) best = k * plane + i;
    }
    picks[i] = static_cast<int>(best);
  }
  return sparse_apply(x, gather_map(x.shape(), Shape{h, w}, picks));
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 3, "global_avg_pool");
  return scale(channel_sum_spatial(x), 1.0f / static_cast<Real>(x.shape()[1] * x.shape()[2]));
}

// ---- dense -----------------------------------------------------------------

Var matvec(const Var& w, const Var& x) {
  require_rank(w, 2, "matvec");
  const int r = w.shape()[0], k = w.shape()[1];
  if (x.shape() != Shape{k}) throw DimensionError("matvec: " + shape_string(w.shape()) + " x " + shape_string(x.shape()));
  Tensor y(Shape{r});
  auto wp = w.value().data();
  auto xp = x.value().data();
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += wp[static_cast<std::size_t>(i) * k + j] * xp[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = static_cast<Real>(acc);
  }
  return tape_of(w).record(std::move(y), {w, x}, [w, x](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = outer(ctx.upstream, x);
    if (ctx.needs[1]) ctx.grads[1] = matvec_t(w, ctx.upstream);
  });
}

Var matvec_t(const Var& w, const Var& g) {
  require_rank(w, 2, "matvec_t");
  const int r = w.shape()[0], k = w.shape()[1];
  if (g.shape() != Shape{r}) throw DimensionError("matvec_t: " + shape_string(w.shape()) + " x " + shape_string(g.shape()));
  Tensor y(Shape{k});
  auto wp = w.value().data();
  auto gp = g.value().data();
  for (int j = 0; j < k; ++j) {
    double acc = 0.0;
    for (int i = 0; i < r; ++i) acc += wp[static_cast<std::size_t>(i) * k + j] * gp[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(j)] = static_cast<Real>(acc);
  }
  return tape_of(w).record(std::move(y), {w, g}, [w, g](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = outer(g, ctx.upstream);
    if (ctx.needs[1]) ctx.grads[1] = matvec(w, ctx.upstream);
  });
}

Var outer(const Var& g, const Var& x) {
  require_rank(g, 1, "outer");
  require_rank(x, 1, "outer");
  const int r = g.shape()[0], k = x.shape()[0];
  Tensor y(Shape{r, k});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < k; ++j) {
      y[static_cast<std::size_t>(i) * k + j] = g.value()[static_cast<std::size_t>(i)] * x.value()[static_cast<std::size_t>(j)];
    }
  }
  return tape_of(g).record(std::move(y), {g, x}, [g, x](BackwardContext& ctx) {
    if (ctx.needs[0]) ctx.grads[0] = matvec(ctx.upstream, x);
    if (ctx.needs[1]) ctx.grads[1] = matvec_t(ctx.upstream, g);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add(matvec(w, x), b); }

Var logsumexp(const Var& x) {
  auto d = x.value().data();
  const Real m = *std::max_element(d.begin(), d.end());
  double acc = 0.0;
  for (Real v : d) acc += std::exp(static_cast<double>(v - m));
  const Real value = m + static_cast<Real>(std::log(acc));
  const Shape shape = x.shape();
  return tape_of(x).record(Tensor::scalar(value), {x}, [x, shape](BackwardContext& ctx) {
    ctx.grads[0] = mul(expand(ctx.upstream, shape), softmax(x));
  });
}

// Primitive so the forward normalises in double after subtracting the max;
// exp(x - logsumexp) loses ~1e-5 in f32 once logits reach the hundreds.
Var softmax(const Var& x) {
  auto d = x.value().data();
  const Real m = *std::max_element(d.begin(), d.end());
  std::vector<double> e(d.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += e[i] = std::exp(static_cast<double>(d[i] - m));
  Tensor p(x.shape());
  for (std::size_t i = 0; i < d.size(); ++i) p[i] = static_cast<Real>(e[i] / acc);
  const Shape shape = x.shape();
  return tape_of(x).record(std::move(p), {x}, [shape](BackwardContext& ctx) {
    const Var& y = ctx.output;
    // dx = y * (g - <g, y>)
    ctx.grads[0] = mul(y, sub(ctx.upstream, expand(sum(mul(ctx.upstream, y)), shape)));
  });
}

}  // namespace atcon::ops
