#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xcam/graph.hpp"
#include "xcam/tensor.hpp"

namespace xcam {

enum class Method { cam, grad_cam, grad_cam_pp, grad_cam_pp_perp };

/// Source of the higher-order derivatives used for the pixel weights.
///   exponential  class score passed through exp (default)
///   softmax      class probability
///   uniform      every pixel weighted 1/Z (debug; reduces ++ to grad_cam)
enum class AlphaRule { exponential, softmax, uniform };

std::string_view to_string(Method method);
/// Accepts "cam", "grad-cam", "grad-cam++", "grad-cam++perp" and the
/// underscore spellings.
Method method_from_string(std::string_view name);
std::string_view to_string(AlphaRule rule);
AlphaRule alpha_rule_from_string(std::string_view name);

/// Denominators at or below this magnitude give alpha = 0.
inline constexpr double kAlphaEpsilon = 1e-12;

struct AlphaMap {
  Tensor values;  // [K,H,W]
};

struct SaliencyMap {
  Tensor values;  // [H,W]
  std::size_t class_index = 0;
  Method method = Method::grad_cam_pp;
};

/// alpha = d2 / (2 d2 + sum_ab(A) d3) per map k and pixel ij, from the
/// diagonal second and third derivatives of the class output.
AlphaMap alpha_from_derivatives(const Tensor& second, const Tensor& third, const Tensor& activations);

/// Exponential output: d2 = e^S g^2 and d3 = e^S g^3 with g = dS/dA. The
/// e^S factor cancels, so it is never formed.
AlphaMap alpha_exponential(const Tensor& gradients, const Tensor& activations);

AlphaMap alpha_uniform(const Shape& shape);

/// dS^k/dA for every class k at one layer, plus the scores themselves.
struct ClassGradients {
  Tensor scores;
  std::vector<Tensor> per_class;
};

/// One backward pass per class.
ClassGradients class_gradients(const ModelGraph& graph, const GradientTape& tape, std::size_t layer);

/// Diagonal derivatives of Y^c = softmax(S)_c with respect to each A_ij,
/// assuming d2S/dA2 = 0 (piecewise linear nets).
struct SoftmaxDerivatives {
  Tensor first, second, third;
};

SoftmaxDerivatives softmax_derivatives(const ClassGradients& grads, std::size_t class_index);

AlphaMap alpha_softmax(const ClassGradients& grads, const Tensor& activations, std::size_t class_index);

/// Per-map weights w_k.
///   cam               dense_row (required)
///   grad_cam          (1/Z) sum_ij g
///   grad_cam_pp       sum_ij alpha relu(g)   (alpha required)
///   grad_cam_pp_perp  sum_ij alpha g         (alpha required)
/// `gradients` is the first derivative of whatever class output is in use.
Tensor feature_weights(Method method, const Tensor& gradients, const Tensor& activations,
                       const AlphaMap* alpha = nullptr, const Tensor* dense_row = nullptr);

/// L = relu(sum_k w_k A^k).
SaliencyMap saliency(const Tensor& weights, const Tensor& activations, std::size_t class_index = 0,
                     Method method = Method::grad_cam_pp);

/// Bilinear, corners aligned. Target must not be smaller than the source.
Tensor upsample(const Tensor& map, std::size_t target_h, std::size_t target_w);

/// Min-max scaling to [0,1]; a constant map becomes all zeros.
Tensor normalize_minmax(const Tensor& map);

/// Min-max scaling followed by binarization: > delta -> 1, otherwise 0.
Tensor normalize_threshold(const Tensor& map, double delta);

/// E = L o I with the [H,W] mask broadcast over the channels of I.
Tensor explanation_map(const Tensor& mask, const Tensor& image);

/// Guided backprop map times the upsampled saliency, broadcast over channels.
Tensor guided_fuse(const Tensor& guided, const Tensor& mask);

/// True when the designated layer feeds straight into GAP and a final dense layer.
bool supports_cam(const ModelGraph& graph);

struct ExplainOptions {
  Method method = Method::grad_cam_pp;
  AlphaRule alpha_rule = AlphaRule::exponential;
  std::optional<std::size_t> class_index;  // defaults to the predicted class
};

struct Explanation {
  std::size_t class_index = 0;
  std::size_t predicted_class = 0;
  Tensor probabilities;
  Tensor activations;  // A at the designated layer
  Tensor gradients;    // first-order signal the weights were built from
  std::optional<AlphaMap> alpha;
  Tensor weights;
  SaliencyMap map;
};

/// Forward pass, backward pass(es) and saliency map on one image.
Explanation explain(const ModelGraph& graph, const Tensor& image, const ExplainOptions& options);
/// Same, reusing a tape from an earlier forward pass on the image.
Explanation explain(const ModelGraph& graph, GradientTape& tape, const ExplainOptions& options);

/// Map upsampled to the input resolution and min-max normalized.
Tensor upsampled_map(const ModelGraph& graph, const SaliencyMap& map);

/// P5 graymap of the min-max scaled map.
std::string saliency_to_pgm(const Tensor& map);
/// Class index, shape and raw values. The method is left out so maps from
/// different methods can be compared byte for byte.
std::string saliency_to_json(const SaliencyMap& map);

}  // namespace xcam
