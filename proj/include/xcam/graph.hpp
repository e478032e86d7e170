#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xcam/tensor.hpp"

namespace xcam {

enum class LayerKind { conv2d, relu, maxpool2d, global_avg_pool, dense, flatten, softmax };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// One node of a static feed-forward graph. Hyperparameters that do not
/// apply to a kind are left at zero; parameter tensors are empty for
/// parameter-free kinds.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;   // conv: input channels; dense: input features
  std::size_t out_channels = 0;  // conv: output channels; dense: output features
  std::size_t kernel = 0;        // conv/maxpool window (square)
  std::size_t stride = 1;
  std::size_t pad = 0;
  Tensor weight;  // conv [out,in,k,k]; dense [out,in]
  Tensor bias;    // [out]

  bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
};

LayerSpec conv2d_layer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                       std::size_t pad = 0);
LayerSpec dense_layer(std::size_t in_features, std::size_t out_features);
LayerSpec relu_layer();
LayerSpec maxpool_layer(std::size_t kernel, std::size_t stride);
LayerSpec gap_layer();
LayerSpec flatten_layer();
LayerSpec softmax_layer();

/// A CNN as an ordered list of layers. The output of the last layer is the
/// vector of class scores S (pre-softmax for every model in the zoo).
struct ModelGraph {
  std::string name;
  Shape input_shape;
  std::size_t num_classes = 0;
  std::size_t designated_layer = 0;  // index whose output holds the maps A^k
  // Fixed input standardization applied before layer 0: (x - offset) * scale.
  double input_offset = 0.0;
  double input_scale = 1.0;
  std::vector<LayerSpec> layers;

  /// Output shape of every layer; throws ShapeError naming the first bad layer.
  std::vector<Shape> infer_shapes() const;
  /// Shape inference plus parameter-shape and designated-layer checks.
  void validate() const;
  std::size_t parameter_count() const;
  Shape designated_shape() const;
};

/// Per-layer parameter gradients, parallel to ModelGraph::layers.
struct ParamGrad {
  Tensor weight;
  Tensor bias;
};
using ParamGrads = std::vector<ParamGrad>;

/// (x - input_offset) * input_scale.
Tensor standardize_input(const ModelGraph& graph, const Tensor& x);

ParamGrads zero_param_grads(const ModelGraph& graph);
void accumulate(ParamGrads& into, const ParamGrads& from, double scale = 1.0);

/// Record of one inference: every layer output and, after backward, the
/// gradient of the seeded score with respect to each of them.
struct GradientTape {
  Tensor input;
  Tensor network_input;  // input after standardization, fed to layer 0
  std::vector<Tensor> activations;  // activations[l] is the output of layer l
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<Tensor> gradients;  // gradients[l] pairs with activations[l]
  Tensor input_gradient;
  std::optional<std::size_t> target_class;

  const Tensor& scores() const { return activations.back(); }
  bool has_gradients() const { return !gradients.empty(); }
};

GradientTape forward(const ModelGraph& graph, const Tensor& input);

/// Runs layers after `layer` on a replacement for that layer's output.
Tensor replay_from(const ModelGraph& graph, std::size_t layer, const Tensor& activation);

/// Seeds dS^c = one-hot(c) and propagates to every layer output and the input.
GradientTape& backward(const ModelGraph& graph, GradientTape& tape, std::size_t class_index);

/// General seed over the scores. When `param_grads` is given, parameter
/// gradients are accumulated into it.
GradientTape& backward_seed(const ModelGraph& graph, GradientTape& tape, const Tensor& seed,
                            ParamGrads* param_grads = nullptr);

/// Guided backpropagation: at relu layers the flowing gradient is zeroed
/// where the forward input is <= 0 or the incoming gradient is <= 0.
Tensor guided_backward(const ModelGraph& graph, const GradientTape& tape, std::size_t class_index);

/// Central differences of S^c with respect to every element of layer
/// `layer`'s output, by perturb-and-replay.
Tensor finite_difference(const ModelGraph& graph, const Tensor& input, std::size_t class_index, std::size_t layer,
                         double h = 1e-4);

/// Same, with respect to the network input.
Tensor finite_difference_input(const ModelGraph& graph, const Tensor& input, std::size_t class_index,
                               double h = 1e-4);

}  // namespace xcam
