#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "xcam/graph.hpp"
#include "xcam/sample.hpp"

namespace xcam {

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::size_t kImageSize = 32;

/// Builds one of the canonical desk-scale architectures with seeded weights:
///   "teacher"  4 conv blocks, maxpool, dense-relu-dense head
///   "student"  2 conv blocks, maxpool, single dense head
///   "gap_cam"  3 conv blocks, global average pool, single dense layer
ModelGraph build_model(std::string_view name, std::uint64_t seed = 0, std::size_t image_size = kImageSize);

/// Uniform in [-s, s] with s = sqrt(6 / (fan_in + fan_out)); biases zero.
void init_weights(ModelGraph& graph, std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainResult {
  ModelGraph model;
  std::vector<double> loss_trace;  // mean objective per epoch
};

/// Per-sample objective: returns the loss and adds its parameter gradients.
using Objective = std::function<double(const ModelGraph& model, const Sample& sample, ParamGrads& grads)>;
using EpochHook = std::function<void(std::size_t epoch, const ModelGraph& model)>;

/// Minibatch SGD with momentum over a seeded shuffle of `data`.
TrainResult train_with_objective(ModelGraph graph, std::span<const Sample> data, const TrainConfig& config,
                                 const Objective& objective, const EpochHook& on_epoch_end = {});

/// Softmax cross-entropy training.
TrainResult train(ModelGraph graph, std::span<const Sample> data, const TrainConfig& config);

/// -log softmax(logits)[label], computed as logsumexp - logit.
double cross_entropy(const Tensor& logits, std::size_t label);

/// Cross-entropy objective used by `train`.
double cross_entropy_objective(const ModelGraph& model, const Sample& sample, ParamGrads& grads);

struct Prediction {
  std::size_t class_index = 0;
  Tensor probabilities;
};

Prediction predict(const ModelGraph& graph, const Tensor& image);
Prediction predict_from_logits(const Tensor& logits);

/// Fraction of samples whose argmax matches the label.
double accuracy(const ModelGraph& graph, std::span<const Sample> data);

}  // namespace xcam
