#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xcam/autograd.hpp"
#include "xcam/model_zoo.hpp"
#include "xcam/saliency.hpp"

namespace xcam {

struct DistillConfig {
  double lambda_interpret = 0.01;  // weight of the saliency matching term
  bool use_kd = false;
  double kd_temperature = 4.0;
  Method saliency_method = Method::grad_cam_pp;
  bool normalize_maps = true;  // min-max scale both maps before comparing
  TrainConfig train;

  void validate() const;
};

/// T^2 * KL(softmax(teacher / T) || softmax(student / T)).
double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);
/// Gradient of kd_loss with respect to the student logits.
Tensor kd_loss_grad(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

/// ||a - b||^2 after bringing both maps to the larger resolution (the
/// smaller one is upsampled) and, when `normalize`, min-max scaling each.
double saliency_distance(const Tensor& student_map, const Tensor& teacher_map, bool normalize);

/// Class-c saliency map of `graph` on `image` built from differentiable ops
/// with the parameters in `params`, so it can be differentiated again.
/// Supports grad_cam, grad_cam_pp (exponential alpha) and grad_cam_pp_perp.
ad::Var differentiable_saliency(const ModelGraph& graph, const std::vector<ad::LayerParams>& params,
                                const Tensor& image, std::size_t class_index, Method method,
                                ad::Var* logits = nullptr);

/// Min-max scaling inside the autodiff graph; a constant map gives zeros.
ad::Var differentiable_minmax(const ad::Var& map);

/// Interpretability loss between student and teacher maps for class c.
double interpret_loss(const ModelGraph& student, const ModelGraph& teacher, const Tensor& image,
                      std::size_t class_index, Method method, bool normalize = true);

struct InterpretTerm {
  double loss = 0.0;
  ParamGrads grads;  // d loss / d student parameters
};

/// Loss and its full gradient (through the student's own backward pass)
/// against a fixed teacher map.
InterpretTerm interpret_loss_with_grad(const ModelGraph& student, const Tensor& teacher_map, const Tensor& image,
                                       std::size_t class_index, Method method, bool normalize);

struct StudentLoss {
  double total = 0.0, cross_entropy = 0.0, interpret = 0.0, kd = 0.0;
};

/// Cross-entropy + lambda * interpret (+ KD) averaged over `batch`.
StudentLoss exp_student_loss(std::span<const Sample> batch, const ModelGraph& student, const ModelGraph& teacher,
                             const DistillConfig& config);

struct DistillResult {
  ModelGraph student;
  std::vector<double> total_trace, cross_entropy_trace, interpret_trace, kd_trace;
  std::string gradient_flow;  // which parts of the loss are differentiated
  std::string map_comparison;  // how maps are aligned and scaled
};

/// Trains `student` on `data` with the teacher frozen.
DistillResult distill_train(ModelGraph student, const ModelGraph& teacher, std::span<const Sample> data,
                            const DistillConfig& config);

std::string distill_result_to_json(const DistillResult& result, const DistillConfig& config);

}  // namespace xcam
