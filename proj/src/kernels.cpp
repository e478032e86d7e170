#include "xcam/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "xcam/error.hpp"

namespace xcam::kernels {

ConvGeometry conv_geometry(const Shape& input, const Shape& weight, std::size_t stride, std::size_t pad) {
  if (input.size() != 3) throw ShapeError("conv2d expects a [C,H,W] input, got " + shape_string(input));
  if (weight.size() != 4) throw ShapeError("conv2d weight must be [out,in,kh,kw], got " + shape_string(weight));
  if (weight[1] != input[0])
    throw ShapeError("conv2d weight expects " + std::to_string(weight[1]) + " input channels, input has " +
                     std::to_string(input[0]));
  if (stride == 0) throw InvalidArgument("conv2d stride must be positive");
  if (input[1] + 2 * pad < weight[2] || input[2] + 2 * pad < weight[3])
    throw ShapeError("conv2d kernel " + shape_string(weight) + " larger than padded input " + shape_string(input));
  ConvGeometry g;
  g.in_channels = input[0];
  g.in_h = input[1];
  g.in_w = input[2];
  g.out_channels = weight[0];
  g.kernel_h = weight[2];
  g.kernel_w = weight[3];
  g.stride = stride;
  g.pad = pad;
  return g;
}

namespace {

// Visits the convolution one output row segment at a time:
// `fn(out_start, in_start, count, in_step, weight_index)` covers output
// elements out_start .. out_start+count-1 and input elements in_start,
// in_start+in_step, ... Rows are visited in a fixed order.
template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t i = 0; i < g.in_channels; ++i) {
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const std::size_t widx = ((o * g.in_channels + i) * g.kernel_h + ky) * g.kernel_w + kx;
          // Output columns whose input column ox*stride + kx - pad is inside the image.
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - pad;
          std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
          std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.in_w) - 1 - shift) / stride;
          if (static_cast<std::ptrdiff_t>(g.in_w) - 1 - shift < 0) continue;
          hi = std::min(hi, static_cast<std::ptrdiff_t>(ow) - 1);
          if (hi < lo) continue;
          const auto count = static_cast<std::size_t>(hi - lo + 1);
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            const std::size_t out_row = (o * oh + oy) * ow;
            const std::size_t in_row = (i * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
            fn(out_row + static_cast<std::size_t>(lo), in_row + static_cast<std::size_t>(lo * stride + shift), count,
               g.stride, widx);
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  if (x.shape() != g.input_shape()) throw ShapeError("conv2d input " + shape_string(x.shape()));
  if (w.shape() != g.weight_shape()) throw ShapeError("conv2d weight " + shape_string(w.shape()));
  Tensor y(g.output_shape());
  double* yd = y.data().data();
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t n, std::size_t step, std::size_t wi) {
    const double k = wd[wi];
    if (step == 1)
      for (std::size_t t = 0; t < n; ++t) yd[oi + t] += k * xd[ii + t];
    else
      for (std::size_t t = 0; t < n; ++t) yd[oi + t] += k * xd[ii + t * step];
  });
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const ConvGeometry& g) {
  if (gy.shape() != g.output_shape()) throw ShapeError("conv2d output grad " + shape_string(gy.shape()));
  if (w.shape() != g.weight_shape()) throw ShapeError("conv2d weight " + shape_string(w.shape()));
  Tensor gx(g.input_shape());
  double* gxd = gx.data().data();
  const double* gyd = gy.data().data();
  const double* wd = w.data().data();
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t n, std::size_t step, std::size_t wi) {
    const double k = wd[wi];
    if (step == 1)
      for (std::size_t t = 0; t < n; ++t) gxd[ii + t] += k * gyd[oi + t];
    else
      for (std::size_t t = 0; t < n; ++t) gxd[ii + t * step] += k * gyd[oi + t];
  });
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const ConvGeometry& g) {
  if (x.shape() != g.input_shape()) throw ShapeError("conv2d input " + shape_string(x.shape()));
  if (gy.shape() != g.output_shape()) throw ShapeError("conv2d output grad " + shape_string(gy.shape()));
  Tensor gw(g.weight_shape());
  double* gwd = gw.data().data();
  const double* gyd = gy.data().data();
  const double* xd = x.data().data();
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t n, std::size_t step, std::size_t wi) {
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) acc += gyd[oi + t] * xd[ii + t * step];
    gwd[wi] += acc;
  });
  return gw;
}

void add_channel_bias(Tensor& y, const Tensor& b) {
  if (y.rank() != 3 || b.size() != y.dim(0))
    throw ShapeError("channel bias " + shape_string(b.shape()) + " for " + shape_string(y.shape()));
  const std::size_t plane = y.dim(1) * y.dim(2);
  for (std::size_t c = 0; c < y.dim(0); ++c)
    for (std::size_t p = 0; p < plane; ++p) y[c * plane + p] += b[c];
}

Tensor channel_sum(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("channel_sum expects [C,H,W], got " + shape_string(x.shape()));
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out({x.dim(0)});
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += x[c * plane + p];
    out[c] = s;
  }
  return out;
}

Tensor expand_channels(const Tensor& v, std::size_t h, std::size_t w) {
  Tensor out({v.size(), h, w});
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < v.size(); ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = v[c];
  return out;
}

Tensor dense(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || w.dim(1) != x.size())
    throw ShapeError("dense weight " + shape_string(w.shape()) + " for input of " + std::to_string(x.size()) +
                     " elements");
  const std::size_t out = w.dim(0), in = w.dim(1);
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < in; ++i) s += w[o * in + i] * x[i];
    y[o] = s;
  }
  return y;
}

Tensor dense_input_grad(const Tensor& gy, const Tensor& w, const Shape& input_shape) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  if (gy.size() != out || shape_size(input_shape) != in)
    throw ShapeError("dense input grad: weight " + shape_string(w.shape()) + ", grad " + shape_string(gy.shape()));
  Tensor gx(input_shape);
  for (std::size_t o = 0; o < out; ++o) {
    const double g = gy[o];
    for (std::size_t i = 0; i < in; ++i) gx[i] += w[o * in + i] * g;
  }
  return gx;
}

Tensor dense_weight_grad(const Tensor& x, const Tensor& gy) {
  const std::size_t out = gy.size(), in = x.size();
  Tensor gw({out, in});
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) gw[o * in + i] = gy[o] * x[i];
  return gw;
}

PoolResult maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 3) throw ShapeError("maxpool2d expects [C,H,W], got " + shape_string(x.shape()));
  if (kernel == 0 || stride == 0) throw InvalidArgument("maxpool2d kernel and stride must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < kernel || w < kernel) throw ShapeError("maxpool2d kernel larger than input " + shape_string(x.shape()));
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  PoolResult r{Tensor({c, oh, ow}), std::vector<std::size_t>(c * oh * ow)};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
  return r;
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& index, const Shape& out_shape) {
  if (shape_size(out_shape) != index.size()) throw ShapeError("gather index count does not match output shape");
  Tensor out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index[i]];
  return out;
}

Tensor scatter_add(const Tensor& g, const std::vector<std::size_t>& index, const Shape& in_shape) {
  if (g.size() != index.size()) throw ShapeError("scatter index count does not match gradient size");
  Tensor out(in_shape);
  for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] += g[i];
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor s = channel_sum(x);
  const double inv = 1.0 / static_cast<double>(x.dim(1) * x.dim(2));
  for (auto& v : s.data()) v *= inv;
  return s;
}

Tensor global_avg_pool_adjoint(const Tensor& g, std::size_t h, std::size_t w) {
  Tensor out = expand_channels(g, h, w);
  const double inv = 1.0 / static_cast<double>(h * w);
  for (auto& v : out.data()) v *= inv;
  return out;
}

double log_sum_exp(const Tensor& logits) {
  const double m = logits.max();
  double s = 0.0;
  for (double v : logits.data()) s += std::exp(v - m);
  return m + std::log(s);
}

Tensor softmax(const Tensor& logits) {
  const double m = logits.max();
  Tensor p = logits;
  double s = 0.0;
  for (auto& v : p.data()) {
    v = std::exp(v - m);
    s += v;
  }
  for (auto& v : p.data()) v /= s;
  return p;
}

Tensor softmax_vjp(const Tensor& p, const Tensor& gy) {
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * gy[i];
  Tensor gx = p;
  for (std::size_t i = 0; i < p.size(); ++i) gx[i] = p[i] * (gy[i] - dot);
  return gx;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    taps[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 2) throw ShapeError("upsample expects a [H,W] map, got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor y({out_h, out_w});
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& b = tx[ox];
      const double top = x.at(a.lo, b.lo) + b.frac * (x.at(a.lo, b.hi) - x.at(a.lo, b.lo));
      const double bottom = x.at(a.hi, b.lo) + b.frac * (x.at(a.hi, b.hi) - x.at(a.hi, b.lo));
      y.at(oy, ox) = top + a.frac * (bottom - top);
    }
  }
  return y;
}

Tensor upsample_bilinear_adjoint(const Tensor& g, std::size_t in_h, std::size_t in_w) {
  if (g.rank() != 2) throw ShapeError("upsample adjoint expects a [H,W] map");
  const std::size_t out_h = g.dim(0), out_w = g.dim(1);
  const auto ty = bilinear_taps(in_h, out_h);
  const auto tx = bilinear_taps(in_w, out_w);
  Tensor x({in_h, in_w});
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& b = tx[ox];
      const double v = g.at(oy, ox);
      x.at(a.lo, b.lo) += (1 - a.frac) * (1 - b.frac) * v;
      x.at(a.lo, b.hi) += (1 - a.frac) * b.frac * v;
      x.at(a.hi, b.lo) += a.frac * (1 - b.frac) * v;
      x.at(a.hi, b.hi) += a.frac * b.frac * v;
    }
  }
  return x;
}

}  // namespace xcam::kernels
