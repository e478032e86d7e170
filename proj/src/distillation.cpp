#include "xcam/distillation.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "xcam/error.hpp"
#include "xcam/kernels.hpp"

namespace xcam {

namespace {

Tensor log_softmax_scaled(const Tensor& logits, double temperature) {
  Tensor z = scaled(logits, 1.0 / temperature);
  const double lse = kernels::log_sum_exp(z);
  for (auto& v : z.data()) v -= lse;
  return z;
}

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw InvalidArgument("temperature must be positive and finite");
}

// Upsamples the smaller of two maps so both share the larger resolution.
std::pair<Tensor, Tensor> align_maps(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("saliency maps must be [H,W]");
  if (a.shape() == b.shape()) return {a, b};
  if (a.dim(0) <= b.dim(0) && a.dim(1) <= b.dim(1)) return {upsample(a, b.dim(0), b.dim(1)), b};
  if (b.dim(0) <= a.dim(0) && b.dim(1) <= a.dim(1)) return {a, upsample(b, a.dim(0), a.dim(1))};
  throw ShapeError("cannot align maps " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

Tensor static_map(const ModelGraph& graph, const Tensor& image, std::size_t c, Method method) {
  return explain(graph, image, {method, AlphaRule::exponential, c}).map.values;
}

void check_class(const ModelGraph& g, std::size_t c, const char* who) {
  if (c >= g.num_classes)
    throw InvalidArgument("class index " + std::to_string(c) + " out of range for the " + who + " model");
}

}  // namespace

void DistillConfig::validate() const {
  if (!(lambda_interpret >= 0.0) || !std::isfinite(lambda_interpret))
    throw InvalidArgument("lambda_interpret must be finite and non-negative");
  check_temperature(kd_temperature);
  if (saliency_method == Method::cam) throw InvalidArgument("distillation needs a gradient-based saliency method");
  train.validate();
}

double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  check_temperature(temperature);
  if (student_logits.size() != teacher_logits.size())
    throw ShapeError("student has " + std::to_string(student_logits.size()) + " classes, teacher " +
                     std::to_string(teacher_logits.size()));
  const Tensor ls = log_softmax_scaled(student_logits, temperature);
  const Tensor lt = log_softmax_scaled(teacher_logits, temperature);
  double kl = 0.0;
  for (std::size_t k = 0; k < lt.size(); ++k) kl += std::exp(lt[k]) * (lt[k] - ls[k]);
  return temperature * temperature * std::max(0.0, kl);
}

Tensor kd_loss_grad(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  check_temperature(temperature);
  if (student_logits.size() != teacher_logits.size()) throw ShapeError("class counts differ");
  const Tensor ps = kernels::softmax(scaled(student_logits, 1.0 / temperature));
  const Tensor pt = kernels::softmax(scaled(teacher_logits, 1.0 / temperature));
  return scaled(ps - pt, temperature);
}

double saliency_distance(const Tensor& student_map, const Tensor& teacher_map, bool normalize) {
  auto [s, t] = align_maps(student_map, teacher_map);
  if (normalize) {
    s = normalize_minmax(s);
    t = normalize_minmax(t);
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += (s[i] - t[i]) * (s[i] - t[i]);
  return acc;
}

ad::Var differentiable_saliency(const ModelGraph& graph, const std::vector<ad::LayerParams>& params,
                                const Tensor& image, std::size_t class_index, Method method, ad::Var* logits) {
  check_class(graph, class_index, "explained");
  // A variable input keeps dS/dA on the tape even when the parameters are constants.
  const auto outs = ad::forward_graph(graph, params, ad::variable(image));
  const ad::Var& a = outs.at(graph.designated_layer);
  if (logits) *logits = outs.back();
  const ad::Var g = ad::grad(ad::select(outs.back(), class_index), {a})[0];
  const std::size_t h = a.shape()[1], w = a.shape()[2];

  ad::Var weights;
  switch (method) {
    case Method::grad_cam:
      weights = ad::scale(ad::channel_sum(g), 1.0 / static_cast<double>(h * w));
      break;
    case Method::grad_cam_pp:
    case Method::grad_cam_pp_perp: {
      const ad::Var g2 = ad::square(g);
      const ad::Var g3 = ad::mul(g2, g);
      const ad::Var total = ad::expand_channels(ad::channel_sum(a), h, w);
      const ad::Var den = ad::add(ad::scale(g2, 2.0), ad::mul(total, g3));
      Tensor ok(den.shape()), fill(den.shape());
      for (std::size_t i = 0; i < ok.size(); ++i) {
        ok[i] = std::abs(den.value()[i]) > kAlphaEpsilon ? 1.0 : 0.0;
        fill[i] = 1.0 - ok[i];
      }
      const ad::Var alpha = ad::mask(ad::div(g2, ad::add(den, ad::constant(fill))), ok);
      const ad::Var signal = method == Method::grad_cam_pp ? ad::relu(g) : g;
      weights = ad::channel_sum(ad::mul(alpha, signal));
      break;
    }
    case Method::cam:
      throw InvalidArgument("cam has no differentiable gradient path");
  }
  return ad::relu(ad::sum_over_channels(ad::mul(ad::expand_channels(weights, h, w), a)));
}

ad::Var differentiable_minmax(const ad::Var& map) {
  const auto& v = map.value().values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (!(*hi > *lo)) return ad::constant(Tensor(map.shape()));
  const auto ilo = static_cast<std::size_t>(lo - v.begin()), ihi = static_cast<std::size_t>(hi - v.begin());
  const ad::Var mn = ad::gather(map, {ilo}, {1});
  const ad::Var range = ad::sub(ad::gather(map, {ihi}, {1}), mn);
  return ad::div(ad::sub(map, ad::broadcast(mn, map.shape())), ad::broadcast(range, map.shape()));
}

double interpret_loss(const ModelGraph& student, const ModelGraph& teacher, const Tensor& image,
                      std::size_t class_index, Method method, bool normalize) {
  check_class(student, class_index, "student");
  check_class(teacher, class_index, "teacher");
  return saliency_distance(static_map(student, image, class_index, method),
                           static_map(teacher, image, class_index, method), normalize);
}

InterpretTerm interpret_loss_with_grad(const ModelGraph& student, const Tensor& teacher_map, const Tensor& image,
                                       std::size_t class_index, Method method, bool normalize) {
  const auto params = ad::graph_params(student, true);
  ad::Var ls = differentiable_saliency(student, params, image, class_index, method);
  Tensor lt = teacher_map;
  if (lt.rank() != 2) throw ShapeError("teacher map must be [H,W]");
  const std::size_t h = std::max(ls.shape()[0], lt.dim(0)), w = std::max(ls.shape()[1], lt.dim(1));
  if (ls.shape()[0] != h || ls.shape()[1] != w) {
    if (ls.shape()[0] > h || ls.shape()[1] > w) throw ShapeError("cannot align student and teacher maps");
    ls = ad::upsample_bilinear(ls, h, w);
  }
  if (lt.dim(0) != h || lt.dim(1) != w) {
    if (lt.dim(0) > h || lt.dim(1) > w) throw ShapeError("cannot align student and teacher maps");
    lt = upsample(lt, h, w);
  }
  if (normalize) {
    ls = differentiable_minmax(ls);
    lt = normalize_minmax(lt);
  }
  const ad::Var loss = ad::sum(ad::square(ad::sub(ls, ad::constant(lt))));

  std::vector<ad::Var> leaves;
  std::vector<std::size_t> owner;
  for (std::size_t l = 0; l < params.size(); ++l)
    if (params[l].weight.defined()) {
      leaves.push_back(params[l].weight);
      leaves.push_back(params[l].bias);
      owner.push_back(l);
    }
  const auto grads = ad::grad(loss, leaves);
  InterpretTerm out;
  out.loss = loss.value()[0];
  out.grads = zero_param_grads(student);
  for (std::size_t i = 0; i < owner.size(); ++i) {
    out.grads[owner[i]].weight = grads[2 * i].value();
    out.grads[owner[i]].bias = grads[2 * i + 1].value();
  }
  return out;
}

StudentLoss exp_student_loss(std::span<const Sample> batch, const ModelGraph& student, const ModelGraph& teacher,
                             const DistillConfig& config) {
  config.validate();
  if (batch.empty()) throw InvalidArgument("empty batch");
  StudentLoss out;
  for (const auto& s : batch) {
    check_class(student, s.label, "student");
    const Tensor logits = forward(student, s.image).scores();
    out.cross_entropy += cross_entropy(logits, s.label);
    if (config.lambda_interpret > 0.0)
      out.interpret += interpret_loss(student, teacher, s.image, s.label, config.saliency_method, config.normalize_maps);
    if (config.use_kd) out.kd += kd_loss(logits, forward(teacher, s.image).scores(), config.kd_temperature);
  }
  const double n = static_cast<double>(batch.size());
  out.cross_entropy /= n;
  out.interpret /= n;
  out.kd /= n;
  out.total = out.cross_entropy + config.lambda_interpret * out.interpret + out.kd;
  return out;
}

DistillResult distill_train(ModelGraph student, const ModelGraph& teacher, std::span<const Sample> data,
                            const DistillConfig& config) {
  config.validate();
  if (data.empty()) throw InvalidArgument("training set is empty");
  if (student.parameter_count() >= teacher.parameter_count())
    throw InvalidArgument("student must have fewer parameters than the teacher");

  // The teacher is frozen, so its logits and maps are computed once.
  struct TeacherView {
    Tensor logits, map;
  };
  std::vector<TeacherView> cache(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    check_class(teacher, data[i].label, "teacher");
    GradientTape tape = forward(teacher, data[i].image);
    cache[i].logits = tape.scores();
    if (config.lambda_interpret > 0.0)
      cache[i].map = explain(teacher, tape, {config.saliency_method, AlphaRule::exponential, data[i].label}).map.values;
  }

  DistillResult result;
  StudentLoss sums;
  const bool interpret_on = config.lambda_interpret > 0.0;

  auto objective = [&](const ModelGraph& model, const Sample& sample, ParamGrads& grads) {
    const auto idx = static_cast<std::size_t>(&sample - data.data());
    const TeacherView& tv = cache.at(idx);
    double ce = 0.0, kd = 0.0, interp = 0.0;
    if (!config.use_kd) {
      ce = cross_entropy_objective(model, sample, grads);
    } else {
      GradientTape tape = forward(model, sample.image);
      Tensor seed = kernels::softmax(tape.scores());
      seed[sample.label] -= 1.0;
      seed = seed + kd_loss_grad(tape.scores(), tv.logits, config.kd_temperature);
      backward_seed(model, tape, seed, &grads);
      ce = cross_entropy(tape.scores(), sample.label);
      kd = kd_loss(tape.scores(), tv.logits, config.kd_temperature);
    }
    if (interpret_on) {
      const InterpretTerm term =
          interpret_loss_with_grad(model, tv.map, sample.image, sample.label, config.saliency_method,
                                   config.normalize_maps);
      accumulate(grads, term.grads, config.lambda_interpret);
      interp = term.loss;
    }
    sums.cross_entropy += ce;
    sums.interpret += interp;
    sums.kd += kd;
    return ce + config.lambda_interpret * interp + kd;
  };
  auto on_epoch = [&](std::size_t, const ModelGraph&) {
    const double n = static_cast<double>(data.size());
    result.cross_entropy_trace.push_back(sums.cross_entropy / n);
    result.interpret_trace.push_back(sums.interpret / n);
    result.kd_trace.push_back(sums.kd / n);
    sums = StudentLoss{};
  };

  TrainResult tr = train_with_objective(std::move(student), data, config.train, objective, on_epoch);
  result.student = std::move(tr.model);
  result.total_trace = std::move(tr.loss_trace);
  result.gradient_flow = interpret_on ? "full: interpret term differentiated through the student's own backward "
                                        "pass (alpha, gradients and activations), teacher held constant"
                                      : "cross-entropy only";
  result.map_comparison = std::string(config.normalize_maps ? "min-max normalized" : "raw") +
                          ", smaller map bilinearly upsampled, class = ground-truth label";
  return result;
}

std::string distill_result_to_json(const DistillResult& result, const DistillConfig& config) {
  nlohmann::ordered_json j;
  j["lambda_interpret"] = config.lambda_interpret;
  j["use_kd"] = config.use_kd;
  j["kd_temperature"] = config.kd_temperature;
  j["saliency_method"] = to_string(config.saliency_method);
  j["normalize_maps"] = config.normalize_maps;
  j["gradient_flow"] = result.gradient_flow;
  j["map_comparison"] = result.map_comparison;
  j["epochs"] = config.train.epochs;
  j["learning_rate"] = config.train.learning_rate;
  j["momentum"] = config.train.momentum;
  j["batch_size"] = config.train.batch_size;
  j["seed"] = config.train.seed;
  j["total_trace"] = result.total_trace;
  j["cross_entropy_trace"] = result.cross_entropy_trace;
  j["interpret_trace"] = result.interpret_trace;
  j["kd_trace"] = result.kd_trace;
  return j.dump(2) + "\n";
}

}  // namespace xcam
