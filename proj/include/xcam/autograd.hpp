#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "xcam/graph.hpp"
#include "xcam/kernels.hpp"
#include "xcam/tensor.hpp"

// Define-by-run reverse-mode autodiff whose backward pass is itself built
// from differentiable ops, so gradients can be differentiated again. The
// static engine in graph.hpp is faster and is what inference and plain
// training use; this engine exists for losses that contain gradients.
namespace xcam::ad {

struct Node;

/// Handle to a node of the expression graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool defined() const { return node_ != nullptr; }
  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
/// Leaf that gradients are taken with respect to.
Var variable(Tensor value);
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
/// Elementwise product with a constant tensor.
Var mask(const Var& a, Tensor m);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);

/// Sum of all elements, shape [1].
Var sum(const Var& a);
/// Broadcasts a one-element Var to `shape`.
Var broadcast(const Var& scalar, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);

Var gather(const Var& x, std::vector<std::size_t> index, const Shape& out_shape);
Var scatter_add(const Var& g, std::vector<std::size_t> index, const Shape& in_shape);
Var select(const Var& x, std::size_t index);

Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& g);
Var conv2d_input_grad(const Var& gy, const Var& w, const kernels::ConvGeometry& g);
Var conv2d_weight_grad(const Var& x, const Var& gy, const kernels::ConvGeometry& g);
Var dense(const Var& x, const Var& w);
Var dense_input_grad(const Var& gy, const Var& w, const Shape& input_shape);
Var dense_weight_grad(const Var& x, const Var& gy);

/// [C,H,W] -> [C] spatial sum, and its adjoint [C] -> [C,H,W].
Var channel_sum(const Var& x);
Var expand_channels(const Var& v, std::size_t h, std::size_t w);
Var add_channel_bias(const Var& y, const Var& b);
/// [K,H,W] -> [H,W] sum over channels, and its adjoint.
Var sum_over_channels(const Var& x);
Var expand_over_channels(const Var& m, std::size_t channels);

Var maxpool2d(const Var& x, std::size_t kernel, std::size_t stride);
Var global_avg_pool(const Var& x);
Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w);
Var upsample_bilinear_adjoint(const Var& g, std::size_t in_h, std::size_t in_w);

Var log_softmax(const Var& logits);
Var softmax(const Var& logits);

/// Gradients of `output` (a one-element Var unless `seed` is given) with
/// respect to each of `inputs`. The results are differentiable Vars.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, const Var& seed = {});

/// Parameter leaves for a ModelGraph, parallel to its layers.
struct LayerParams {
  Var weight;
  Var bias;
};

/// Wraps graph parameters as leaves (variables when `trainable`).
std::vector<LayerParams> graph_params(const ModelGraph& graph, bool trainable);

/// Differentiable forward pass; returns the output Var of every layer.
std::vector<Var> forward_graph(const ModelGraph& graph, const std::vector<LayerParams>& params, const Var& input);

}  // namespace xcam::ad
