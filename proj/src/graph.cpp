#include "xcam/graph.hpp"

#include <cmath>

#include <array>
#include <utility>

#include "xcam/error.hpp"
#include "xcam/kernels.hpp"

namespace xcam {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 7> kKindNames{{
    {LayerKind::conv2d, "conv2d"},
    {LayerKind::relu, "relu"},
    {LayerKind::maxpool2d, "maxpool2d"},
    {LayerKind::global_avg_pool, "global-average-pool"},
    {LayerKind::dense, "dense"},
    {LayerKind::flatten, "flatten"},
    {LayerKind::softmax, "softmax"},
}};

std::string layer_label(const ModelGraph& graph, std::size_t l) {
  return "layer " + std::to_string(l) + " (" + std::string(to_string(graph.layers[l].kind)) + ")";
}

Tensor apply_layer(const LayerSpec& layer, const Tensor& x, std::vector<std::size_t>* argmax) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      const auto g = kernels::conv_geometry(x.shape(), layer.weight.shape(), layer.stride, layer.pad);
      Tensor y = kernels::conv2d(x, layer.weight, g);
      kernels::add_channel_bias(y, layer.bias);
      return y;
    }
    case LayerKind::relu: {
      Tensor y = x;
      for (auto& v : y.data())
        if (!(v > 0.0)) v = 0.0;
      return y;
    }
    case LayerKind::maxpool2d: {
      auto r = kernels::maxpool2d(x, layer.kernel, layer.stride);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.output);
    }
    case LayerKind::global_avg_pool:
      if (x.rank() != 3) throw ShapeError("global average pool expects [C,H,W], got " + shape_string(x.shape()));
      return kernels::global_avg_pool(x);
    case LayerKind::dense: {
      Tensor y = kernels::dense(x, layer.weight);
      if (layer.bias.size() != y.size()) throw ShapeError("dense bias " + shape_string(layer.bias.shape()));
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += layer.bias[i];
      return y;
    }
    case LayerKind::flatten:
      return x.reshaped({x.size()});
    case LayerKind::softmax:
      if (x.rank() != 1) throw ShapeError("softmax expects a vector, got " + shape_string(x.shape()));
      return kernels::softmax(x);
  }
  throw InvalidArgument("unknown layer kind");
}

// Vector-Jacobian product of one layer. `guided` switches relu layers to the
// guided-backpropagation rule.
Tensor layer_vjp(const LayerSpec& layer, const Tensor& x, const Tensor& y, const std::vector<std::size_t>& argmax,
                 const Tensor& gy, ParamGrad* pg, bool guided) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      const auto g = kernels::conv_geometry(x.shape(), layer.weight.shape(), layer.stride, layer.pad);
      if (pg) {
        const Tensor gw = kernels::conv2d_weight_grad(x, gy, g);
        const Tensor gb = kernels::channel_sum(gy);
        for (std::size_t i = 0; i < gw.size(); ++i) pg->weight[i] += gw[i];
        for (std::size_t i = 0; i < gb.size(); ++i) pg->bias[i] += gb[i];
      }
      return kernels::conv2d_input_grad(gy, layer.weight, g);
    }
    case LayerKind::relu: {
      Tensor gx = gy;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const bool closed = !(x[i] > 0.0) || (guided && !(gy[i] > 0.0));
        if (closed) gx[i] = 0.0;
      }
      return gx;
    }
    case LayerKind::maxpool2d:
      return kernels::scatter_add(gy, argmax, x.shape());
    case LayerKind::global_avg_pool:
      return kernels::global_avg_pool_adjoint(gy, x.dim(1), x.dim(2));
    case LayerKind::dense: {
      if (pg) {
        const Tensor gw = kernels::dense_weight_grad(x, gy);
        for (std::size_t i = 0; i < gw.size(); ++i) pg->weight[i] += gw[i];
        for (std::size_t i = 0; i < gy.size(); ++i) pg->bias[i] += gy[i];
      }
      return kernels::dense_input_grad(gy, layer.weight, x.shape());
    }
    case LayerKind::flatten:
      return gy.reshaped(x.shape());
    case LayerKind::softmax:
      return kernels::softmax_vjp(y, gy);
  }
  throw InvalidArgument("unknown layer kind");
}

Tensor run_layers(const ModelGraph& graph, std::size_t first, Tensor x) {
  for (std::size_t l = first; l < graph.layers.size(); ++l) {
    try {
      x = apply_layer(graph.layers[l], x, nullptr);
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(graph, l) + ": " + e.what());
    }
  }
  return x;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec conv2d_layer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                       std::size_t pad) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  l.weight = Tensor({out_channels, in_channels, kernel, kernel});
  l.bias = Tensor({out_channels});
  return l;
}

LayerSpec dense_layer(std::size_t in_features, std::size_t out_features) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in_channels = in_features;
  l.out_channels = out_features;
  l.weight = Tensor({out_features, in_features});
  l.bias = Tensor({out_features});
  return l;
}

LayerSpec relu_layer() { return LayerSpec{}; }

LayerSpec maxpool_layer(std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool2d;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

LayerSpec gap_layer() {
  LayerSpec l;
  l.kind = LayerKind::global_avg_pool;
  return l;
}

LayerSpec flatten_layer() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec softmax_layer() {
  LayerSpec l;
  l.kind = LayerKind::softmax;
  return l;
}

std::vector<Shape> ModelGraph::infer_shapes() const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape cur = input_shape;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    auto fail = [&](const std::string& why) -> void {
      throw ShapeError(layer_label(*this, l) + ": " + why + " (input " + shape_string(cur) + ")");
    };
    switch (layer.kind) {
      case LayerKind::conv2d: {
        if (cur.size() != 3) fail("expects [C,H,W]");
        if (layer.weight.shape() != Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel})
          fail("weight shape " + shape_string(layer.weight.shape()) + " inconsistent with hyperparameters");
        if (layer.bias.shape() != Shape{layer.out_channels}) fail("bias shape " + shape_string(layer.bias.shape()));
        try {
          cur = kernels::conv_geometry(cur, layer.weight.shape(), layer.stride, layer.pad).output_shape();
        } catch (const Error& e) {
          fail(e.what());
        }
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2d:
        if (cur.size() != 3 || layer.kernel == 0 || layer.stride == 0 || cur[1] < layer.kernel ||
            cur[2] < layer.kernel)
          fail("bad pooling window");
        cur = {cur[0], (cur[1] - layer.kernel) / layer.stride + 1, (cur[2] - layer.kernel) / layer.stride + 1};
        break;
      case LayerKind::global_avg_pool:
        if (cur.size() != 3) fail("expects [C,H,W]");
        cur = {cur[0]};
        break;
      case LayerKind::dense:
        if (layer.weight.shape() != Shape{layer.out_channels, layer.in_channels})
          fail("weight shape " + shape_string(layer.weight.shape()) + " inconsistent with hyperparameters");
        if (layer.bias.shape() != Shape{layer.out_channels}) fail("bias shape " + shape_string(layer.bias.shape()));
        if (shape_size(cur) != layer.in_channels) fail("expects " + std::to_string(layer.in_channels) + " features");
        cur = {layer.out_channels};
        break;
      case LayerKind::flatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::softmax:
        if (cur.size() != 1) fail("expects a vector");
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelGraph::validate() const {
  if (layers.empty()) throw ShapeError("model '" + name + "' has no layers");
  if (!std::isfinite(input_offset) || !std::isfinite(input_scale) || input_scale == 0.0)
    throw InvalidArgument("model '" + name + "' has an invalid input standardization");
  const auto shapes = infer_shapes();
  if (shapes.back() != Shape{num_classes})
    throw ShapeError("model '" + name + "' emits " + shape_string(shapes.back()) + " but declares " +
                     std::to_string(num_classes) + " classes");
  if (designated_layer >= layers.size())
    throw ShapeError("designated layer " + std::to_string(designated_layer) + " out of range");
  const auto kind = layers[designated_layer].kind;
  const bool conv_like =
      kind == LayerKind::conv2d ||
      (kind == LayerKind::relu && designated_layer > 0 && layers[designated_layer - 1].kind == LayerKind::conv2d);
  if (!conv_like) throw ShapeError("designated layer must be a conv layer or a relu directly after one");
  const auto& s = shapes[designated_layer];
  if (s[1] < 2 || s[2] < 2) throw ShapeError("designated layer spatial extent below 2x2: " + shape_string(s));
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

Shape ModelGraph::designated_shape() const { return infer_shapes().at(designated_layer); }

ParamGrads zero_param_grads(const ModelGraph& graph) {
  ParamGrads grads(graph.layers.size());
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    const auto& layer = graph.layers[l];
    if (!layer.has_params()) continue;
    grads[l].weight = Tensor(layer.weight.shape());
    grads[l].bias = Tensor(layer.bias.shape());
  }
  return grads;
}

void accumulate(ParamGrads& into, const ParamGrads& from, double scale) {
  if (into.size() != from.size()) throw ShapeError("parameter gradient sets differ in layer count");
  for (std::size_t l = 0; l < into.size(); ++l) {
    if (into[l].weight.empty()) continue;
    for (std::size_t i = 0; i < into[l].weight.size(); ++i) into[l].weight[i] += scale * from[l].weight[i];
    for (std::size_t i = 0; i < into[l].bias.size(); ++i) into[l].bias[i] += scale * from[l].bias[i];
  }
}

Tensor standardize_input(const ModelGraph& graph, const Tensor& x) {
  if (graph.input_offset == 0.0 && graph.input_scale == 1.0) return x;
  Tensor out = x;
  for (auto& v : out.data()) v = (v - graph.input_offset) * graph.input_scale;
  return out;
}

GradientTape forward(const ModelGraph& graph, const Tensor& input) {
  if (input.shape() != graph.input_shape)
    throw ShapeError("input shape " + shape_string(input.shape()) + " does not match model input " +
                     shape_string(graph.input_shape));
  GradientTape tape;
  tape.input = input;
  tape.network_input = standardize_input(graph, input);
  tape.activations.reserve(graph.layers.size());
  tape.pool_argmax.resize(graph.layers.size());
  const Tensor* x = &tape.network_input;
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    try {
      tape.activations.push_back(apply_layer(graph.layers[l], *x, &tape.pool_argmax[l]));
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(graph, l) + ": " + e.what());
    }
    require_finite(tape.activations.back(), layer_label(graph, l));
    x = &tape.activations.back();
  }
  return tape;
}

Tensor replay_from(const ModelGraph& graph, std::size_t layer, const Tensor& activation) {
  if (layer >= graph.layers.size()) throw InvalidArgument("replay layer out of range");
  return run_layers(graph, layer + 1, activation);
}

GradientTape& backward_seed(const ModelGraph& graph, GradientTape& tape, const Tensor& seed,
                            ParamGrads* param_grads) {
  if (tape.activations.size() != graph.layers.size()) throw InvalidArgument("backward requires a completed forward");
  if (seed.size() != tape.scores().size()) throw ShapeError("seed size does not match score count");
  const std::size_t n = graph.layers.size();
  tape.gradients.assign(n, Tensor());
  tape.gradients[n - 1] = seed.reshaped(tape.scores().shape());
  for (std::size_t l = n; l-- > 0;) {
    const Tensor& x = l == 0 ? tape.network_input : tape.activations[l - 1];
    ParamGrad* pg = param_grads ? &(*param_grads)[l] : nullptr;
    Tensor gx = layer_vjp(graph.layers[l], x, tape.activations[l], tape.pool_argmax[l], tape.gradients[l], pg, false);
    require_finite(gx, layer_label(graph, l) + " gradient");
    if (l == 0)
      tape.input_gradient = scaled(gx, graph.input_scale);
    else
      tape.gradients[l - 1] = std::move(gx);
  }
  return tape;
}

GradientTape& backward(const ModelGraph& graph, GradientTape& tape, std::size_t class_index) {
  if (class_index >= graph.num_classes)
    throw InvalidArgument("class index " + std::to_string(class_index) + " out of range for " +
                          std::to_string(graph.num_classes) + " classes");
  Tensor seed({graph.num_classes});
  seed[class_index] = 1.0;
  backward_seed(graph, tape, seed);
  tape.target_class = class_index;
  return tape;
}

Tensor guided_backward(const ModelGraph& graph, const GradientTape& tape, std::size_t class_index) {
  if (tape.activations.size() != graph.layers.size()) throw InvalidArgument("guided backward requires a forward pass");
  if (class_index >= graph.num_classes)
    throw InvalidArgument("class index " + std::to_string(class_index) + " out of range");
  Tensor g({graph.num_classes});
  g[class_index] = 1.0;
  for (std::size_t l = graph.layers.size(); l-- > 0;) {
    const Tensor& x = l == 0 ? tape.network_input : tape.activations[l - 1];
    g = layer_vjp(graph.layers[l], x, tape.activations[l], tape.pool_argmax[l], g, nullptr, true);
  }
  return scaled(g, graph.input_scale);
}

Tensor finite_difference(const ModelGraph& graph, const Tensor& input, std::size_t class_index, std::size_t layer,
                         double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  if (class_index >= graph.num_classes) throw InvalidArgument("class index out of range");
  const GradientTape tape = forward(graph, input);
  Tensor a = tape.activations.at(layer);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double orig = a[i];
    a[i] = orig + h;
    const double up = replay_from(graph, layer, a)[class_index];
    a[i] = orig - h;
    const double down = replay_from(graph, layer, a)[class_index];
    a[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

Tensor finite_difference_input(const ModelGraph& graph, const Tensor& input, std::size_t class_index, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  if (class_index >= graph.num_classes) throw InvalidArgument("class index out of range");
  if (input.shape() != graph.input_shape) throw ShapeError("input shape mismatch");
  Tensor a = input;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double orig = a[i];
    a[i] = orig + h;
    const double up = run_layers(graph, 0, standardize_input(graph, a))[class_index];
    a[i] = orig - h;
    const double down = run_layers(graph, 0, standardize_input(graph, a))[class_index];
    a[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace xcam
