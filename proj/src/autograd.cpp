#include "xcam/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_map>
#include <unordered_set>

#include "xcam/error.hpp"

namespace xcam::ad {

using Vjp = std::function<std::vector<Var>(const Var& upstream)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  Vjp vjp;  // one entry per input; an undefined Var means no contribution
};

const Tensor& Var::value() const { return node_->value; }

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

namespace {

Var make(Tensor value, std::vector<Var> inputs, Vjp vjp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
  }
  return Var(std::move(n));
}

void same_shape(const Var& a, const Var& b, const char* op) { require_same_shape(a.value(), b.value(), op); }

Tensor zip(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Var constant(Tensor value) { return make(std::move(value), {}, nullptr); }

Var variable(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var detach(const Var& x) { return constant(x.value()); }

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "ad::add");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
              [](const Var& u) { return std::vector<Var>{u, u}; });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "ad::sub");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
              [](const Var& u) { return std::vector<Var>{u, scale(u, -1.0)}; });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "ad::mul");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
              [a, b](const Var& u) { return std::vector<Var>{mul(u, b), mul(u, a)}; });
}

Var div(const Var& a, const Var& b) {
  same_shape(a, b, "ad::div");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b}, [a, b](const Var& u) {
    return std::vector<Var>{div(u, b), scale(div(mul(u, a), mul(b, b)), -1.0)};
  });
}

Var scale(const Var& a, double factor) {
  return make(xcam::scaled(a.value(), factor), {a},
              [factor](const Var& u) { return std::vector<Var>{scale(u, factor)}; });
}

Var add_scalar(const Var& a, double offset) {
  Tensor v = a.value();
  for (auto& x : v.data()) x += offset;
  return make(std::move(v), {a}, [](const Var& u) { return std::vector<Var>{u}; });
}

Var mask(const Var& a, Tensor m) {
  Tensor v = hadamard(a.value(), m);
  return make(std::move(v), {a}, [m = std::move(m)](const Var& u) { return std::vector<Var>{mask(u, m)}; });
}

Var exp(const Var& a) {
  Tensor v = a.value();
  for (auto& x : v.data()) x = std::exp(x);
  return make(std::move(v), {a}, [a](const Var& u) { return std::vector<Var>{mul(u, exp(a))}; });
}

Var log(const Var& a) {
  Tensor v = a.value();
  for (auto& x : v.data()) x = std::log(x);
  return make(std::move(v), {a}, [a](const Var& u) { return std::vector<Var>{div(u, a)}; });
}

Var relu(const Var& a) {
  Tensor m = a.value();
  for (auto& x : m.data()) x = x > 0.0 ? 1.0 : 0.0;
  return mask(a, std::move(m));
}

Var square(const Var& a) { return mul(a, a); }

Var sum(const Var& a) {
  return make(Tensor::scalar(a.value().sum()), {a},
              [shape = a.shape()](const Var& u) { return std::vector<Var>{broadcast(u, shape)}; });
}

Var broadcast(const Var& scalar, const Shape& shape) {
  if (scalar.value().size() != 1) throw ShapeError("ad::broadcast expects a one-element Var");
  return make(Tensor(shape, scalar.value()[0]), {scalar}, [](const Var& u) { return std::vector<Var>{sum(u)}; });
}

Var reshape(const Var& a, const Shape& shape) {
  return make(a.value().reshaped(shape), {a},
              [from = a.shape()](const Var& u) { return std::vector<Var>{reshape(u, from)}; });
}

Var gather(const Var& x, std::vector<std::size_t> index, const Shape& out_shape) {
  Tensor v = kernels::gather(x.value(), index, out_shape);
  return make(std::move(v), {x}, [index = std::move(index), in = x.shape()](const Var& u) {
    return std::vector<Var>{scatter_add(u, index, in)};
  });
}

Var scatter_add(const Var& g, std::vector<std::size_t> index, const Shape& in_shape) {
  Tensor v = kernels::scatter_add(g.value(), index, in_shape);
  return make(std::move(v), {g}, [index = std::move(index), out = g.shape()](const Var& u) {
    return std::vector<Var>{gather(u, index, out)};
  });
}

Var select(const Var& x, std::size_t index) { return gather(x, {index}, {1}); }

Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& g) {
  return make(kernels::conv2d(x.value(), w.value(), g), {x, w}, [x, w, g](const Var& u) {
    return std::vector<Var>{conv2d_input_grad(u, w, g), conv2d_weight_grad(x, u, g)};
  });
}

Var conv2d_input_grad(const Var& gy, const Var& w, const kernels::ConvGeometry& g) {
  return make(kernels::conv2d_input_grad(gy.value(), w.value(), g), {gy, w}, [gy, w, g](const Var& u) {
    return std::vector<Var>{conv2d(u, w, g), conv2d_weight_grad(u, gy, g)};
  });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, const kernels::ConvGeometry& g) {
  return make(kernels::conv2d_weight_grad(x.value(), gy.value(), g), {x, gy}, [x, gy, g](const Var& u) {
    return std::vector<Var>{conv2d_input_grad(gy, u, g), conv2d(x, u, g)};
  });
}

Var dense(const Var& x, const Var& w) {
  return make(kernels::dense(x.value(), w.value()), {x, w}, [x, w](const Var& u) {
    return std::vector<Var>{dense_input_grad(u, w, x.shape()), dense_weight_grad(x, u)};
  });
}

Var dense_input_grad(const Var& gy, const Var& w, const Shape& input_shape) {
  return make(kernels::dense_input_grad(gy.value(), w.value(), input_shape), {gy, w}, [gy, w](const Var& u) {
    return std::vector<Var>{dense(u, w), dense_weight_grad(u, gy)};
  });
}

Var dense_weight_grad(const Var& x, const Var& gy) {
  return make(kernels::dense_weight_grad(x.value(), gy.value()), {x, gy}, [x, gy](const Var& u) {
    return std::vector<Var>{dense_input_grad(gy, u, x.shape()), dense(x, u)};
  });
}

Var channel_sum(const Var& x) {
  const std::size_t h = x.value().dim(1), w = x.value().dim(2);
  return make(kernels::channel_sum(x.value()), {x},
              [h, w](const Var& u) { return std::vector<Var>{expand_channels(u, h, w)}; });
}

Var expand_channels(const Var& v, std::size_t h, std::size_t w) {
  return make(kernels::expand_channels(v.value(), h, w), {v},
              [](const Var& u) { return std::vector<Var>{channel_sum(u)}; });
}

Var add_channel_bias(const Var& y, const Var& b) {
  Tensor v = y.value();
  kernels::add_channel_bias(v, b.value());
  return make(std::move(v), {y, b}, [](const Var& u) { return std::vector<Var>{u, channel_sum(u)}; });
}

Var sum_over_channels(const Var& x) {
  const Tensor& t = x.value();
  if (t.rank() != 3) throw ShapeError("sum_over_channels expects [K,H,W], got " + shape_string(t.shape()));
  const std::size_t k = t.dim(0), plane = t.dim(1) * t.dim(2);
  Tensor out({t.dim(1), t.dim(2)});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[p] += t[c * plane + p];
  return make(std::move(out), {x}, [k](const Var& u) { return std::vector<Var>{expand_over_channels(u, k)}; });
}

Var expand_over_channels(const Var& m, std::size_t channels) {
  const Tensor& t = m.value();
  if (t.rank() != 2) throw ShapeError("expand_over_channels expects [H,W]");
  const std::size_t plane = t.size();
  Tensor out({channels, t.dim(0), t.dim(1)});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = t[p];
  return make(std::move(out), {m}, [](const Var& u) { return std::vector<Var>{sum_over_channels(u)}; });
}

Var maxpool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  auto r = kernels::maxpool2d(x.value(), kernel, stride);
  return gather(x, std::move(r.argmax), r.output.shape());
}

Var global_avg_pool(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.value().dim(1) * x.value().dim(2));
  return scale(channel_sum(x), inv);
}

Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = x.value().dim(0), w = x.value().dim(1);
  return make(kernels::upsample_bilinear(x.value(), out_h, out_w), {x},
              [h, w](const Var& u) { return std::vector<Var>{upsample_bilinear_adjoint(u, h, w)}; });
}

Var upsample_bilinear_adjoint(const Var& g, std::size_t in_h, std::size_t in_w) {
  const std::size_t oh = g.value().dim(0), ow = g.value().dim(1);
  return make(kernels::upsample_bilinear_adjoint(g.value(), in_h, in_w), {g},
              [oh, ow](const Var& u) { return std::vector<Var>{upsample_bilinear(u, oh, ow)}; });
}

Var log_softmax(const Var& logits) {
  const Var shifted = add_scalar(logits, -logits.value().max());
  const Var lse = log(sum(exp(shifted)));
  return sub(shifted, broadcast(lse, logits.shape()));
}

Var softmax(const Var& logits) { return exp(log_softmax(logits)); }

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, const Var& seed) {
  if (!seed.defined() && output.value().size() != 1)
    throw ShapeError("ad::grad needs a seed for non-scalar output " + shape_string(output.shape()));
  if (seed.defined()) require_same_shape(seed.value(), output.value(), "ad::grad seed");

  // Reverse topological order over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (output.requires_grad()) {
    stack.emplace_back(output.node(), 0);
    seen.insert(output.node());
  }
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].node();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Only nodes with a path down to a requested input need cotangents.
  std::unordered_set<Node*> wanted;
  for (const auto& in : inputs)
    if (in.defined()) wanted.insert(in.node());
  std::unordered_set<Node*> relevant;
  for (Node* n : order) {
    bool r = wanted.count(n) > 0;
    for (const auto& in : n->inputs) r = r || relevant.count(in.node()) > 0;
    if (r) relevant.insert(n);
  }

  std::unordered_map<Node*, Var> cot;
  if (output.requires_grad())
    cot[output.node()] = seed.defined() ? seed : constant(Tensor(output.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->vjp || !relevant.count(n)) continue;
    auto found = cot.find(n);
    if (found == cot.end()) continue;
    const std::vector<Var> parts = n->vjp(found->second);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const Var& in = n->inputs[i];
      if (!in.requires_grad() || !parts[i].defined() || !relevant.count(in.node())) continue;
      auto [slot, fresh] = cot.try_emplace(in.node(), parts[i]);
      if (!fresh) slot->second = add(slot->second, parts[i]);
    }
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = in.defined() ? cot.find(in.node()) : cot.end();
    result.push_back(found != cot.end() ? found->second : constant(Tensor(in.shape())));
  }
  return result;
}

std::vector<LayerParams> graph_params(const ModelGraph& graph, bool trainable) {
  std::vector<LayerParams> params(graph.layers.size());
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    const auto& layer = graph.layers[l];
    if (!layer.has_params()) continue;
    params[l].weight = trainable ? variable(layer.weight) : constant(layer.weight);
    params[l].bias = trainable ? variable(layer.bias) : constant(layer.bias);
  }
  return params;
}

std::vector<Var> forward_graph(const ModelGraph& graph, const std::vector<LayerParams>& params, const Var& input) {
  if (input.shape() != graph.input_shape) throw ShapeError("input shape does not match model input");
  std::vector<Var> outs;
  outs.reserve(graph.layers.size());
  Var x = input;
  if (graph.input_offset != 0.0 || graph.input_scale != 1.0)
    x = scale(add_scalar(input, -graph.input_offset), graph.input_scale);
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    const auto& layer = graph.layers[l];
    switch (layer.kind) {
      case LayerKind::conv2d: {
        const auto g = kernels::conv_geometry(x.shape(), layer.weight.shape(), layer.stride, layer.pad);
        x = add_channel_bias(conv2d(x, params[l].weight, g), params[l].bias);
        break;
      }
      case LayerKind::relu:
        x = relu(x);
        break;
      case LayerKind::maxpool2d:
        x = maxpool2d(x, layer.kernel, layer.stride);
        break;
      case LayerKind::global_avg_pool:
        x = global_avg_pool(x);
        break;
      case LayerKind::dense:
        x = add(dense(x, params[l].weight), params[l].bias);
        break;
      case LayerKind::flatten:
        x = reshape(x, {x.value().size()});
        break;
      case LayerKind::softmax:
        x = softmax(x);
        break;
    }
    outs.push_back(x);
  }
  return outs;
}

}  // namespace xcam::ad
