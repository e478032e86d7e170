#pragma once

#include <cstddef>
#include <vector>

#include "xcam/tensor.hpp"

// Raw tensor kernels. Convolution and dense layers are written as the three
// partial derivatives of the trilinear form B(x, W, gy) = <gy, op(x, W)>,
// which makes the adjoint of every kernel another kernel of the same family.
namespace xcam::kernels {

struct ConvGeometry {
  std::size_t in_channels = 0, in_h = 0, in_w = 0;
  std::size_t out_channels = 0, kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1, pad = 0;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  Shape input_shape() const { return {in_channels, in_h, in_w}; }
  Shape output_shape() const { return {out_channels, out_h(), out_w()}; }
  Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
};

/// Validates the geometry against an input tensor shape; throws ShapeError.
ConvGeometry conv_geometry(const Shape& input, const Shape& weight, std::size_t stride, std::size_t pad);

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& g);
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const ConvGeometry& g);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const ConvGeometry& g);

/// Adds b[c] to every pixel of channel c in place.
void add_channel_bias(Tensor& y, const Tensor& b);
/// Sum over the spatial axes of a [C,H,W] tensor.
Tensor channel_sum(const Tensor& x);
/// Broadcasts a [C] tensor to [C,H,W].
Tensor expand_channels(const Tensor& v, std::size_t h, std::size_t w);

// Dense: x has `in` elements (any shape), w is [out, in].
Tensor dense(const Tensor& x, const Tensor& w);
Tensor dense_input_grad(const Tensor& gy, const Tensor& w, const Shape& input_shape);
Tensor dense_weight_grad(const Tensor& x, const Tensor& gy);

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

PoolResult maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor gather(const Tensor& x, const std::vector<std::size_t>& index, const Shape& out_shape);
Tensor scatter_add(const Tensor& g, const std::vector<std::size_t>& index, const Shape& in_shape);

/// Global average pool [C,H,W] -> [C] and its adjoint.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_adjoint(const Tensor& g, std::size_t h, std::size_t w);

Tensor softmax(const Tensor& logits);
/// Vector-Jacobian product of softmax given its output p.
Tensor softmax_vjp(const Tensor& p, const Tensor& gy);
double log_sum_exp(const Tensor& logits);

/// Bilinear resampling of a [H,W] map with corner alignment and its adjoint.
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor upsample_bilinear_adjoint(const Tensor& g, std::size_t in_h, std::size_t in_w);

}  // namespace xcam::kernels
