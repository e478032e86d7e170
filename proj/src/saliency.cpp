#include "xcam/saliency.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "xcam/error.hpp"
#include "xcam/kernels.hpp"
#include "xcam/synth_data.hpp"

namespace xcam {

namespace {

void require_maps(const Tensor& t, const std::string& what) {
  if (t.rank() != 3) throw ShapeError(what + " must be [K,H,W], got " + shape_string(t.shape()));
}

void require_map(const Tensor& t, const std::string& what) {
  if (t.rank() != 2) throw ShapeError(what + " must be [H,W], got " + shape_string(t.shape()));
}

void require_spatial_match(const Tensor& mask, const Tensor& image, const std::string& what) {
  require_map(mask, what + " mask");
  if (image.rank() != 3 || image.dim(1) != mask.dim(0) || image.dim(2) != mask.dim(1))
    throw ShapeError(what + ": mask " + shape_string(mask.shape()) + " does not align with " +
                     shape_string(image.shape()));
}

// sum_ij a_ij * f(g_ij) per map.
template <class F>
Tensor weighted_map_sum(const Tensor& alpha, const Tensor& g, F f) {
  const std::size_t k = g.dim(0), hw = g.dim(1) * g.dim(2);
  Tensor w({k});
  for (std::size_t m = 0; m < k; ++m) {
    double acc = 0.0;
    for (std::size_t p = m * hw; p < (m + 1) * hw; ++p) acc += alpha[p] * f(g[p]);
    w[m] = acc;
  }
  return w;
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::cam: return "cam";
    case Method::grad_cam: return "grad-cam";
    case Method::grad_cam_pp: return "grad-cam++";
    case Method::grad_cam_pp_perp: return "grad-cam++perp";
  }
  return "?";
}

Method method_from_string(std::string_view name) {
  if (name == "cam") return Method::cam;
  if (name == "grad-cam" || name == "grad_cam") return Method::grad_cam;
  if (name == "grad-cam++" || name == "grad_cam_pp") return Method::grad_cam_pp;
  if (name == "grad-cam++perp" || name == "grad_cam_pp_perp") return Method::grad_cam_pp_perp;
  throw InvalidArgument("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(AlphaRule rule) {
  switch (rule) {
    case AlphaRule::exponential: return "exponential";
    case AlphaRule::softmax: return "softmax";
    case AlphaRule::uniform: return "uniform";
  }
  return "?";
}

AlphaRule alpha_rule_from_string(std::string_view name) {
  if (name == "exponential") return AlphaRule::exponential;
  if (name == "softmax") return AlphaRule::softmax;
  if (name == "uniform") return AlphaRule::uniform;
  throw InvalidArgument("unknown alpha rule '" + std::string(name) + "'");
}

AlphaMap alpha_from_derivatives(const Tensor& second, const Tensor& third, const Tensor& activations) {
  require_maps(activations, "activations");
  require_same_shape(second, activations, "second derivatives vs activations");
  require_same_shape(third, activations, "third derivatives vs activations");
  const std::size_t k = activations.dim(0), hw = activations.dim(1) * activations.dim(2);
  AlphaMap out{Tensor(activations.shape())};
  for (std::size_t m = 0; m < k; ++m) {
    double total = 0.0;
    for (std::size_t p = m * hw; p < (m + 1) * hw; ++p) total += activations[p];
    for (std::size_t p = m * hw; p < (m + 1) * hw; ++p) {
      const double den = 2.0 * second[p] + total * third[p];
      const double a = std::abs(den) <= kAlphaEpsilon ? 0.0 : second[p] / den;
      out.values[p] = std::isfinite(a) ? a : 0.0;
    }
  }
  return out;
}

AlphaMap alpha_exponential(const Tensor& gradients, const Tensor& activations) {
  require_same_shape(gradients, activations, "gradients vs activations");
  Tensor g2(gradients.shape()), g3(gradients.shape());
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    g2[i] = gradients[i] * gradients[i];
    g3[i] = g2[i] * gradients[i];
  }
  return alpha_from_derivatives(g2, g3, activations);
}

AlphaMap alpha_uniform(const Shape& shape) {
  if (shape.size() != 3) throw ShapeError("alpha map must be [K,H,W], got " + shape_string(shape));
  return {Tensor(shape, 1.0 / static_cast<double>(shape[1] * shape[2]))};
}

ClassGradients class_gradients(const ModelGraph& graph, const GradientTape& tape, std::size_t layer) {
  if (layer >= graph.layers.size()) throw InvalidArgument("layer index out of range");
  ClassGradients out;
  out.scores = tape.scores();
  GradientTape work = tape;
  for (std::size_t c = 0; c < graph.num_classes; ++c) {
    backward(graph, work, c);
    out.per_class.push_back(work.gradients[layer]);
  }
  return out;
}

SoftmaxDerivatives softmax_derivatives(const ClassGradients& grads, std::size_t class_index) {
  const std::size_t n = grads.per_class.size();
  if (n == 0 || n != grads.scores.size())
    throw InvalidArgument("softmax derivatives need the gradient of every class score");
  if (class_index >= n) throw InvalidArgument("class index " + std::to_string(class_index) + " out of range");
  const Tensor p = kernels::softmax(grads.scores);
  const Shape& shape = grads.per_class[0].shape();
  for (const auto& g : grads.per_class) require_same_shape(g, grads.per_class[0], "per-class gradients");
  SoftmaxDerivatives d{Tensor(shape), Tensor(shape), Tensor(shape)};
  const double y = p[class_index];
  for (std::size_t i = 0; i < d.first.size(); ++i) {
    // Moments of the per-class gradients under the softmax distribution.
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += p[k] * grads.per_class[k][i];
    double var = 0.0, skew = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double c = grads.per_class[k][i] - mean;
      var += p[k] * c * c;
      skew += p[k] * c * c * c;
    }
    const double dc = grads.per_class[class_index][i] - mean;
    d.first[i] = y * dc;
    d.second[i] = y * (dc * dc - var);
    d.third[i] = y * (dc * dc * dc - 3.0 * dc * var - skew);
  }
  return d;
}

AlphaMap alpha_softmax(const ClassGradients& grads, const Tensor& activations, std::size_t class_index) {
  const SoftmaxDerivatives d = softmax_derivatives(grads, class_index);
  return alpha_from_derivatives(d.second, d.third, activations);
}

Tensor feature_weights(Method method, const Tensor& gradients, const Tensor& activations, const AlphaMap* alpha,
                       const Tensor* dense_row) {
  require_maps(activations, "activations");
  const std::size_t k = activations.dim(0);
  switch (method) {
    case Method::cam:
      if (!dense_row) throw InvalidArgument("cam weights need the dense layer row");
      if (dense_row->size() != k)
        throw ShapeError("dense row has " + std::to_string(dense_row->size()) + " entries for " + std::to_string(k) +
                         " maps");
      return dense_row->reshaped({k});
    case Method::grad_cam: {
      require_same_shape(gradients, activations, "gradients vs activations");
      // Same loop as the ++ weights so that alpha = 1/Z reproduces it bit for bit.
      const AlphaMap uniform = alpha_uniform(activations.shape());
      return weighted_map_sum(uniform.values, gradients, [](double g) { return g; });
    }
    case Method::grad_cam_pp:
    case Method::grad_cam_pp_perp: {
      require_same_shape(gradients, activations, "gradients vs activations");
      if (!alpha) throw InvalidArgument(std::string(to_string(method)) + " weights need an alpha map");
      require_same_shape(alpha->values, activations, "alpha vs activations");
      if (method == Method::grad_cam_pp)
        return weighted_map_sum(alpha->values, gradients, [](double g) { return g > 0.0 ? g : 0.0; });
      return weighted_map_sum(alpha->values, gradients, [](double g) { return g; });
    }
  }
  throw InvalidArgument("unknown method");
}

SaliencyMap saliency(const Tensor& weights, const Tensor& activations, std::size_t class_index, Method method) {
  require_maps(activations, "activations");
  const std::size_t k = activations.dim(0), h = activations.dim(1), w = activations.dim(2);
  if (weights.size() != k)
    throw ShapeError("got " + std::to_string(weights.size()) + " weights for " + std::to_string(k) + " maps");
  SaliencyMap out{Tensor({h, w}), class_index, method};
  for (std::size_t p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (std::size_t m = 0; m < k; ++m) acc += weights[m] * activations[m * h * w + p];
    out.values[p] = acc > 0.0 ? acc : 0.0;
  }
  return out;
}

Tensor upsample(const Tensor& map, std::size_t target_h, std::size_t target_w) {
  require_map(map, "saliency map");
  if (target_h < map.dim(0) || target_w < map.dim(1))
    throw InvalidArgument("cannot upsample " + shape_string(map.shape()) + " to smaller size [" +
                          std::to_string(target_h) + "," + std::to_string(target_w) + "]");
  return kernels::upsample_bilinear(map, target_h, target_w);
}

Tensor normalize_minmax(const Tensor& map) {
  Tensor out(map.shape());
  const double lo = map.min(), hi = map.max();
  if (!(hi > lo)) return out;
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - lo) * inv;
  return out;
}

Tensor normalize_threshold(const Tensor& map, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("threshold must lie in [0, 1]");
  Tensor out = normalize_minmax(map);
  if (!(map.max() > map.min())) return out;
  for (auto& v : out.data()) v = v > delta ? 1.0 : 0.0;
  return out;
}

Tensor explanation_map(const Tensor& mask, const Tensor& image) {
  require_spatial_match(mask, image, "explanation map");
  Tensor out(image.shape());
  const std::size_t hw = mask.size();
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] = mask[p] * image[c * hw + p];
  return out;
}

Tensor guided_fuse(const Tensor& guided, const Tensor& mask) { return explanation_map(mask, guided); }

bool supports_cam(const ModelGraph& graph) {
  const std::size_t d = graph.designated_layer;
  return graph.layers.size() == d + 3 && graph.layers[d + 1].kind == LayerKind::global_avg_pool &&
         graph.layers[d + 2].kind == LayerKind::dense;
}

Explanation explain(const ModelGraph& graph, const Tensor& image, const ExplainOptions& options) {
  GradientTape tape = forward(graph, image);
  return explain(graph, tape, options);
}

Explanation explain(const ModelGraph& graph, GradientTape& tape, const ExplainOptions& options) {
  Explanation ex;
  const Tensor& scores = tape.scores();
  ex.probabilities = kernels::softmax(scores);
  ex.predicted_class = scores.argmax();
  ex.class_index = options.class_index.value_or(ex.predicted_class);
  if (ex.class_index >= graph.num_classes)
    throw InvalidArgument("class index " + std::to_string(ex.class_index) + " out of range for " +
                          std::to_string(graph.num_classes) + " classes");
  const std::size_t layer = graph.designated_layer;
  ex.activations = tape.activations.at(layer);

  if (options.method == Method::cam) {
    if (!supports_cam(graph))
      throw InvalidArgument("cam needs a model whose designated layer feeds global average pooling and one dense "
                            "layer; '" + graph.name + "' does not");
    const Tensor& w = graph.layers.back().weight;
    const std::size_t k = w.dim(1);
    Tensor row({k});
    for (std::size_t m = 0; m < k; ++m) row[m] = w.at(ex.class_index, m);
    ex.weights = feature_weights(Method::cam, Tensor(), ex.activations, nullptr, &row);
  } else if (options.alpha_rule == AlphaRule::softmax && options.method != Method::grad_cam) {
    const ClassGradients cg = class_gradients(graph, tape, layer);
    const SoftmaxDerivatives d = softmax_derivatives(cg, ex.class_index);
    ex.alpha = alpha_from_derivatives(d.second, d.third, ex.activations);
    ex.gradients = d.first;
    ex.weights = feature_weights(options.method, ex.gradients, ex.activations, &*ex.alpha);
  } else {
    backward(graph, tape, ex.class_index);
    ex.gradients = tape.gradients[layer];
    if (options.method != Method::grad_cam)
      ex.alpha = options.alpha_rule == AlphaRule::uniform ? alpha_uniform(ex.activations.shape())
                                                          : alpha_exponential(ex.gradients, ex.activations);
    ex.weights = feature_weights(options.method, ex.gradients, ex.activations, ex.alpha ? &*ex.alpha : nullptr);
  }
  ex.map = saliency(ex.weights, ex.activations, ex.class_index, options.method);
  return ex;
}

Tensor upsampled_map(const ModelGraph& graph, const SaliencyMap& map) {
  return normalize_minmax(upsample(map.values, graph.input_shape.at(1), graph.input_shape.at(2)));
}

std::string saliency_to_pgm(const Tensor& map) {
  require_map(map, "saliency map");
  return encode_pnm(normalize_minmax(map));
}

std::string saliency_to_json(const SaliencyMap& map) {
  nlohmann::ordered_json j;
  j["class_index"] = map.class_index;
  j["shape"] = map.values.shape();
  j["values"] = map.values.values();
  return j.dump() + "\n";
}

}  // namespace xcam
