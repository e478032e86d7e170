#include "xcam/model_zoo.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "xcam/error.hpp"
#include "xcam/kernels.hpp"
#include "xcam/rng.hpp"

namespace xcam {

namespace {

ModelGraph teacher(std::size_t size) {
  ModelGraph g;
  g.name = "teacher";
  g.layers = {
      conv2d_layer(3, 8, 3, 1, 1),  relu_layer(), maxpool_layer(2, 2),
      conv2d_layer(8, 16, 3, 1, 1), relu_layer(), maxpool_layer(2, 2),
      conv2d_layer(16, 16, 3, 1, 1), relu_layer(),
      conv2d_layer(16, 16, 3, 1, 1), relu_layer(),
      maxpool_layer(2, 2),           flatten_layer(),
      dense_layer(16 * (size / 8) * (size / 8), 32), relu_layer(), dense_layer(32, kNumClasses),
  };
  g.designated_layer = 9;
  return g;
}

ModelGraph student(std::size_t size) {
  ModelGraph g;
  g.name = "student";
  g.layers = {
      conv2d_layer(3, 8, 3, 1, 1), relu_layer(), maxpool_layer(2, 2),
      conv2d_layer(8, 8, 3, 1, 1), relu_layer(),
      maxpool_layer(2, 2),         flatten_layer(), dense_layer(8 * (size / 4) * (size / 4), kNumClasses),
  };
  g.designated_layer = 4;
  return g;
}

ModelGraph gap_cam(std::size_t) {
  ModelGraph g;
  g.name = "gap_cam";
  g.layers = {
      conv2d_layer(3, 8, 3, 1, 1),   relu_layer(), maxpool_layer(2, 2),
      conv2d_layer(8, 16, 3, 1, 1),  relu_layer(), maxpool_layer(2, 2),
      conv2d_layer(16, 16, 3, 1, 1), relu_layer(),
      gap_layer(),                   dense_layer(16, kNumClasses),
  };
  g.designated_layer = 7;
  return g;
}

}  // namespace

ModelGraph build_model(std::string_view name, std::uint64_t seed, std::size_t image_size) {
  if (image_size < 8 || image_size % 8 != 0)
    throw InvalidArgument("image size must be a positive multiple of 8, got " + std::to_string(image_size));
  ModelGraph g;
  if (name == "teacher")
    g = teacher(image_size);
  else if (name == "student")
    g = student(image_size);
  else if (name == "gap_cam")
    g = gap_cam(image_size);
  else
    throw InvalidArgument("unknown model '" + std::string(name) + "' (expected teacher, student or gap_cam)");
  g.input_shape = {3, image_size, image_size};
  // Images live in [0,1]; centring them keeps plain SGD well conditioned.
  g.input_offset = 0.5;
  g.input_scale = 2.0;
  g.num_classes = kNumClasses;
  init_weights(g, seed);
  g.validate();
  return g;
}

void init_weights(ModelGraph& graph, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : graph.layers) {
    if (!layer.has_params()) continue;
    const std::size_t receptive = layer.kind == LayerKind::conv2d ? layer.kernel * layer.kernel : 1;
    const double fan_in = static_cast<double>(layer.in_channels * receptive);
    const double fan_out = static_cast<double>(layer.out_channels * receptive);
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& w : layer.weight.data()) w = rng.uniform(-s, s);
    for (auto& b : layer.bias.data()) b = 0.0;
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw InvalidArgument("learning rate must be finite and non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (epochs < 1) throw InvalidArgument("epochs must be at least 1");
  if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  return kernels::log_sum_exp(logits) - logits[label];
}

double cross_entropy_objective(const ModelGraph& model, const Sample& sample, ParamGrads& grads) {
  GradientTape tape = forward(model, sample.image);
  Tensor seed = kernels::softmax(tape.scores());
  seed[sample.label] -= 1.0;
  backward_seed(model, tape, seed, &grads);
  return cross_entropy(tape.scores(), sample.label);
}

TrainResult train_with_objective(ModelGraph graph, std::span<const Sample> data, const TrainConfig& config,
                                 const Objective& objective, const EpochHook& on_epoch_end) {
  config.validate();
  if (data.empty()) throw InvalidArgument("training set is empty");
  for (const auto& s : data)
    if (s.label >= graph.num_classes)
      throw InvalidArgument("label " + std::to_string(s.label) + " out of range for " +
                            std::to_string(graph.num_classes) + " classes");

  Rng rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ParamGrads velocity = zero_param_grads(graph);
  TrainResult result;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      ParamGrads grads = zero_param_grads(graph);
      for (std::size_t i = start; i < end; ++i) {
        const double loss = objective(graph, data[order[i]], grads);
        if (!std::isfinite(loss))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                             std::to_string(order[i]));
        epoch_loss += loss;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t l = 0; l < graph.layers.size(); ++l) {
        auto& layer = graph.layers[l];
        if (!layer.has_params()) continue;
        auto step = [&](Tensor& param, Tensor& vel, const Tensor& g) {
          for (std::size_t i = 0; i < param.size(); ++i) {
            vel[i] = config.momentum * vel[i] - config.learning_rate * (g[i] * inv);
            param[i] += vel[i];
          }
        };
        step(layer.weight, velocity[l].weight, grads[l].weight);
        step(layer.bias, velocity[l].bias, grads[l].bias);
      }
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(data.size()));
    if (on_epoch_end) on_epoch_end(epoch, graph);
  }
  result.model = std::move(graph);
  return result;
}

TrainResult train(ModelGraph graph, std::span<const Sample> data, const TrainConfig& config) {
  return train_with_objective(std::move(graph), data, config, cross_entropy_objective);
}

Prediction predict_from_logits(const Tensor& logits) {
  return {logits.argmax(), kernels::softmax(logits)};
}

Prediction predict(const ModelGraph& graph, const Tensor& image) {
  if (image.shape() != graph.input_shape)
    throw ShapeError("image shape " + shape_string(image.shape()) + " does not match model input " +
                     shape_string(graph.input_shape));
  return predict_from_logits(forward(graph, image).scores());
}

double accuracy(const ModelGraph& graph, std::span<const Sample> data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : data)
    if (predict(graph, s.image).class_index == s.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace xcam
