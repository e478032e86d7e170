// xcam: train small CNNs on synthetic shapes and explain their decisions.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "xcam/checkpoint.hpp"
#include "xcam/distillation.hpp"
#include "xcam/error.hpp"
#include "xcam/log.hpp"
#include "xcam/metrics.hpp"
#include "xcam/model_zoo.hpp"
#include "xcam/render.hpp"
#include "xcam/saliency.hpp"
#include "xcam/synth_data.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace xcam;

namespace {

// Stable exit codes, one per error class.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kIo = 2,
  kFormat = 3,
  kInvalid = 4,
  kShape = 5,
  kNumeric = 6,
};

// Collects the files a command writes and the report describing them.
class Run {
 public:
  Run(std::string command, fs::path out) : command_(std::move(command)), out_(std::move(out)) {
    fs::create_directories(out_);
    start_ = std::chrono::steady_clock::now();
  }

  ordered_json& config() { return config_; }
  ordered_json& metrics() { return metrics_; }

  fs::path write(const std::string& name, const std::string& bytes) {
    const fs::path p = out_ / name;
    write_file(p, bytes);
    outputs_.push_back(name);
    spdlog::debug("wrote {}", p.string());
    return p;
  }

  void finish() {
    ordered_json r;
    r["command"] = command_;
    r["config"] = config_;
    r["outputs"] = outputs_;
    if (!metrics_.is_null()) r["metrics"] = metrics_;
    write_file(out_ / "report.json", r.dump(2) + "\n");
    // Wall time stays out of the report so reruns are byte-identical.
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    spdlog::info("{} finished in {:.2f}s, report at {}", command_, secs, (out_ / "report.json").string());
  }

 private:
  std::string command_;
  fs::path out_;
  ordered_json config_ = ordered_json::object();
  ordered_json metrics_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidArgument(std::string("bad number '") + item + "' in " + what);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<double> theta_grid(const std::string& text) {
  if (text.empty()) return {};
  // "11" means an evenly spaced grid of 11 points on [0,1].
  if (text.find(',') == std::string::npos && text.find('.') == std::string::npos) {
    const int n = std::stoi(text);
    if (n < 2) throw InvalidArgument("theta grid needs at least 2 points");
    std::vector<double> g;
    for (int i = 0; i < n; ++i) g.push_back(static_cast<double>(i) / (n - 1));
    return g;
  }
  return parse_list(text, "--theta-grid");
}

std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = text.find(',', pos);
    out.push_back(method_from_string(text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

ordered_json methods_json(const std::vector<Method>& ms) {
  ordered_json j = ordered_json::array();
  for (auto m : ms) j.push_back(to_string(m));
  return j;
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::uint64_t seed = 1;
  std::size_t count = 600;
  std::size_t size = kImageSize;
  double multi = 0.3;
  std::string split = "train";
  std::string out;
};

void cmd_generate(const GenerateArgs& a) {
  Run run("generate", a.out);
  run.config() = {{"seed", a.seed}, {"num_samples", a.count}, {"image_size", a.size},
                  {"multi_instance_prob", a.multi}, {"split", a.split}};
  const Dataset ds = generate(a.seed, a.count, a.size, a.multi, a.split);
  save_dataset(a.out, ds);
  std::size_t boxes = 0;
  for (const auto& s : ds.samples) boxes += s.boxes.size();
  run.metrics() = {{"num_samples", ds.samples.size()}, {"num_boxes", boxes}};
  spdlog::info("generated {} images with {} boxes in {}", ds.samples.size(), boxes, a.out);
  run.finish();
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string model = "teacher";
  std::string data;
  std::string val;
  TrainConfig config;
  std::string out;
};

void cmd_train(const TrainArgs& a) {
  Run run("train", a.out);
  const Dataset ds = load_dataset(a.data);
  run.config() = {{"model", a.model},
                  {"data", a.data},
                  {"learning_rate", a.config.learning_rate},
                  {"momentum", a.config.momentum},
                  {"epochs", a.config.epochs},
                  {"batch_size", a.config.batch_size},
                  {"seed", a.config.seed}};
  ModelGraph graph = build_model(a.model, a.config.seed, ds.manifest.image_size);
  spdlog::info("training {} ({} parameters) on {} images", a.model, graph.parameter_count(), ds.samples.size());
  const TrainResult tr = train_with_objective(
      std::move(graph), ds.samples, a.config, cross_entropy_objective,
      [](std::size_t epoch, const ModelGraph&) { spdlog::debug("epoch {} done", epoch + 1); });
  run.write("model.ckpt", serialize_checkpoint(tr.model));
  ordered_json trace = {{"loss_trace", tr.loss_trace}};
  run.write("loss_trace.json", trace.dump(2) + "\n");
  run.metrics()["final_loss"] = tr.loss_trace.back();
  run.metrics()["train_accuracy"] = accuracy(tr.model, ds.samples);
  if (!a.val.empty()) run.metrics()["val_accuracy"] = accuracy(tr.model, load_dataset(a.val).samples);
  run.finish();
}

// ---------------------------------------------------------------- explain

struct ExplainArgs {
  std::string model;
  std::string image;
  std::string method = "grad-cam++";
  std::optional<std::size_t> class_index;
  std::optional<double> delta;
  std::string alpha = "exponential";
  bool alpha_uniform = false;
  std::string out;
};

void cmd_explain(const ExplainArgs& a) {
  const ModelGraph graph = load_checkpoint(a.model);
  Tensor image = read_image(a.image);
  if (image.shape() != graph.input_shape)
    throw ShapeError("image " + a.image + " is " + shape_string(image.shape()) + ", model expects " +
                     shape_string(graph.input_shape));
  const bool guided = a.method == "guided-grad-cam++";
  ExplainOptions opt;
  opt.method = guided ? Method::grad_cam_pp : method_from_string(a.method);
  opt.alpha_rule = a.alpha_uniform ? AlphaRule::uniform : alpha_rule_from_string(a.alpha);
  opt.class_index = a.class_index;

  Run run("explain", a.out);
  run.config() = {{"model", a.model}, {"image", a.image}, {"method", a.method}, {"alpha_rule", to_string(opt.alpha_rule)}};
  run.config()["class"] = a.class_index ? ordered_json(*a.class_index) : ordered_json(nullptr);
  run.config()["delta"] = a.delta ? ordered_json(*a.delta) : ordered_json(nullptr);

  GradientTape tape = forward(graph, image);
  const Explanation ex = explain(graph, tape, opt);
  const Tensor up = upsampled_map(graph, ex.map);
  run.write("saliency.pgm", saliency_to_pgm(ex.map.values));
  run.write("saliency.json", saliency_to_json(ex.map));
  run.write("overlay.ppm", encode_pnm(render_heatmap(up, image)));
  run.write("explanation.ppm", encode_pnm(explanation_map(up, image)));
  if (a.delta) run.write("mask.pgm", encode_pnm(normalize_threshold(up, *a.delta)));
  if (guided) {
    const Tensor g = guided_backward(graph, tape, ex.class_index);
    const Tensor fused = guided_fuse(g, up);
    // Signed gradients are shown around mid-grey.
    const double scale = std::max(fused.max(), -fused.min());
    Tensor shown(fused.shape(), 0.5);
    if (scale > 0.0)
      for (std::size_t i = 0; i < fused.size(); ++i) shown[i] = 0.5 + 0.5 * fused[i] / scale;
    run.write("guided.ppm", encode_pnm(shown));
  }
  run.metrics() = {{"class", ex.class_index},
                   {"predicted_class", ex.predicted_class},
                   {"probabilities", ex.probabilities.values()},
                   {"weights", ex.weights.values()}};
  run.finish();
}

// ---------------------------------------------------------------- evaluate / ablate / roc

struct EvalArgs {
  std::string model;
  std::string data;
  std::string methods = "grad-cam,grad-cam++";
  std::string deltas = "0,0.25,0.5";
  std::string theta;
  std::string alpha = "exponential";
  std::size_t jobs = 1;
  bool per_image = false;
  std::string out;
};

EvalConfig eval_config(const EvalArgs& a) {
  EvalConfig c;
  c.methods = parse_methods(a.methods);
  c.deltas = parse_list(a.deltas, "--delta");
  c.theta_grid = theta_grid(a.theta);
  c.alpha_rule = alpha_rule_from_string(a.alpha);
  c.jobs = a.jobs;
  return c;
}

MetricsReport run_eval(Run& run, const EvalArgs& a, const EvalConfig& c) {
  const ModelGraph graph = load_checkpoint(a.model);
  const Dataset ds = load_dataset(a.data);
  if (ds.samples.empty()) throw InvalidArgument("dataset " + a.data + " is empty");
  run.config() = {{"model", a.model},        {"data", a.data},        {"methods", methods_json(c.methods)},
                  {"deltas", c.deltas},      {"theta_grid", c.theta_grid}, {"alpha_rule", to_string(c.alpha_rule)}};
  spdlog::info("evaluating {} images on {} thread(s)", ds.samples.size(), c.jobs);
  return evaluate(graph, ds.samples, c);
}

void cmd_evaluate(const EvalArgs& a) {
  Run run("evaluate", a.out);
  const EvalConfig c = eval_config(a);
  const MetricsReport rep = run_eval(run, a, c);
  run.write("metrics.json", report_to_json(rep, a.per_image));
  const std::string table = report_table(rep);
  run.write("metrics.txt", table);
  for (const auto& m : rep.methods)
    if (!m.roc.empty()) run.write(fmt::format("roc_{}.csv", to_string(m.method)), roc_to_csv(m.roc));
  std::fputs(table.c_str(), stdout);
  run.metrics() = ordered_json::parse(report_to_json(rep));
  run.finish();
}

void cmd_ablate(EvalArgs a) {
  a.methods = "grad-cam++,grad-cam++perp";
  Run run("ablate", a.out);
  const EvalConfig c = eval_config(a);
  const MetricsReport rep = run_eval(run, a, c);
  run.write("ablation.json", report_to_json(rep, a.per_image));
  const std::string table = report_table(rep);
  run.write("ablation.txt", table);
  std::fputs(table.c_str(), stdout);
  const double gap = rep.methods[1].average_drop - rep.methods[0].average_drop;
  run.metrics() = {{"average_drop_grad_cam_pp", rep.methods[0].average_drop},
                   {"average_drop_grad_cam_pp_perp", rep.methods[1].average_drop},
                   {"perp_minus_pp", gap}};
  run.finish();
}

void cmd_roc(EvalArgs a) {
  if (a.theta.empty()) a.theta = "11";
  Run run("roc", a.out);
  EvalConfig c = eval_config(a);
  c.deltas.clear();
  const MetricsReport rep = run_eval(run, a, c);
  ordered_json curves = ordered_json::object();
  for (const auto& m : rep.methods) {
    run.write(fmt::format("roc_{}.csv", to_string(m.method)), roc_to_csv(m.roc));
    ordered_json pts = ordered_json::array();
    for (const auto& p : m.roc)
      pts.push_back({{"theta", p.theta}, {"relative_confidence", p.relative_confidence}, {"area_fraction", p.area_fraction}});
    curves[std::string(to_string(m.method))] = std::move(pts);
  }
  run.write("roc.json", curves.dump(2) + "\n");
  run.metrics() = curves;
  run.finish();
}

// ---------------------------------------------------------------- distill

struct DistillArgs {
  std::string teacher;
  std::string data;
  std::string test;
  std::string method = "grad-cam++";
  double lambda = 0.01;
  bool kd = false;
  double temperature = 4.0;
  bool raw_maps = false;
  TrainConfig config;
  std::string out;
};

void cmd_distill(const DistillArgs& a) {
  const ModelGraph teacher = load_checkpoint(a.teacher);
  const Dataset train_ds = load_dataset(a.data);
  const Dataset test_ds = load_dataset(a.test.empty() ? a.data : a.test);
  Run run("distill", a.out);
  run.config() = {{"teacher", a.teacher},         {"data", a.data},
                  {"test_data", a.test},          {"method", a.method},
                  {"lambda_interpret", a.lambda}, {"kd", a.kd},
                  {"temperature", a.temperature}, {"normalize_maps", !a.raw_maps},
                  {"learning_rate", a.config.learning_rate}, {"momentum", a.config.momentum},
                  {"epochs", a.config.epochs},    {"batch_size", a.config.batch_size},
                  {"seed", a.config.seed}};

  struct Row {
    std::string name;
    double lambda;
    bool kd;
  };
  std::vector<Row> rows{{"cross-entropy", 0.0, false}, {"cross-entropy+interpret", a.lambda, false}};
  if (a.kd) {
    rows.push_back({"cross-entropy+kd", 0.0, true});
    rows.push_back({"cross-entropy+interpret+kd", a.lambda, true});
  }

  ordered_json table = ordered_json::array();
  std::string text = fmt::format("{:<28}  {:>10}  {:>10}\n", "Loss function", "Test error", "Final loss");
  const double teacher_error = 1.0 - accuracy(teacher, test_ds.samples);
  for (const auto& row : rows) {
    DistillConfig dc;
    dc.lambda_interpret = row.lambda;
    dc.use_kd = row.kd;
    dc.kd_temperature = a.temperature;
    dc.saliency_method = method_from_string(a.method);
    dc.normalize_maps = !a.raw_maps;
    dc.train = a.config;
    spdlog::info("distill: {}", row.name);
    const ModelGraph student = build_model("student", a.config.seed, train_ds.manifest.image_size);
    const DistillResult res = distill_train(student, teacher, train_ds.samples, dc);
    const double err = 1.0 - accuracy(res.student, test_ds.samples);
    std::string slug = row.name;
    for (auto& ch : slug)
      if (ch == '+') ch = '_';
    run.write("student_" + slug + ".ckpt", serialize_checkpoint(res.student));
    run.write("traces_" + slug + ".json", distill_result_to_json(res, dc));
    table.push_back({{"loss", row.name},
                     {"test_error", err},
                     {"final_loss", res.total_trace.back()},
                     {"gradient_flow", res.gradient_flow},
                     {"map_comparison", res.map_comparison}});
    text += fmt::format("{:<28}  {:>10.4f}  {:>10.4f}\n", row.name, err, res.total_trace.back());
  }
  text += fmt::format("{:<28}  {:>10.4f}  {:>10}\n", "teacher", teacher_error, "-");
  ordered_json cmp = {{"teacher_test_error", teacher_error}, {"rows", table}};
  run.write("comparison.json", cmp.dump(2) + "\n");
  run.write("comparison.txt", text);
  std::fputs(text.c_str(), stdout);
  run.metrics() = cmp;
  run.finish();
}

void add_train_flags(CLI::App* sub, TrainConfig& c) {
  sub->add_option("--lr", c.learning_rate, "Learning rate")->capture_default_str();
  sub->add_option("--momentum", c.momentum, "Momentum")->capture_default_str();
  sub->add_option("--epochs", c.epochs, "Epochs")->capture_default_str();
  sub->add_option("--batch", c.batch_size, "Batch size")->capture_default_str();
  sub->add_option("--seed", c.seed, "Seed for initialization and shuffling")->capture_default_str();
}

void add_eval_flags(CLI::App* sub, EvalArgs& a, bool methods) {
  sub->add_option("--model", a.model, "Checkpoint")->required();
  sub->add_option("--data", a.data, "Dataset directory")->required();
  if (methods) sub->add_option("--method", a.methods, "Comma-separated methods")->capture_default_str();
  sub->add_option("--delta", a.deltas, "Comma-separated thresholds for localization")->capture_default_str();
  sub->add_option("--theta-grid", a.theta, "Occlusion quantiles: a count or a comma list");
  sub->add_option("--alpha", a.alpha, "Alpha rule: exponential or softmax")->capture_default_str();
  sub->add_option("--jobs", a.jobs, "Worker threads")->capture_default_str();
  sub->add_flag("--per-image", a.per_image, "Include per-image confidences");
  sub->add_option("--out", a.out, "Output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  try {
    init_logging();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  }

  CLI::App app{"Gradient-weighted class activation maps for small CNNs"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic shapes dataset");
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("-n,--count", gen.count, "Number of images")->capture_default_str();
  g->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  g->add_option("--multi", gen.multi, "Probability of 2-3 instances")->capture_default_str();
  g->add_option("--split", gen.split, "train or val")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  tr.config.learning_rate = 0.02;
  tr.config.epochs = 20;
  auto* t = app.add_subcommand("train", "Train a model from the zoo");
  t->add_option("--model", tr.model, "teacher, student or gap_cam")->capture_default_str();
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--val", tr.val, "Optional validation dataset");
  add_train_flags(t, tr.config);
  t->add_option("--out", tr.out, "Output directory")->required();

  ExplainArgs ex;
  auto* e = app.add_subcommand("explain", "Saliency map for one image");
  e->add_option("--model", ex.model, "Checkpoint")->required();
  e->add_option("--image", ex.image, "Input image (PPM)")->required();
  e->add_option("--method", ex.method,
                "cam, grad-cam, grad-cam++, grad-cam++perp or guided-grad-cam++")
      ->capture_default_str();
  e->add_option("--class", ex.class_index, "Class to explain (default: predicted)");
  e->add_option("--delta", ex.delta, "Also write the mask thresholded at this value");
  e->add_option("--alpha", ex.alpha, "Alpha rule: exponential or softmax")->capture_default_str();
  e->add_flag("--alpha-uniform", ex.alpha_uniform, "Debug: force alpha = 1/Z");
  e->add_option("--out", ex.out, "Output directory")->required();

  EvalArgs ev;
  auto* v = app.add_subcommand("evaluate", "Faithfulness and localization metrics");
  add_eval_flags(v, ev, true);

  EvalArgs ab;
  auto* b = app.add_subcommand("ablate", "grad-cam++ against grad-cam++perp");
  add_eval_flags(b, ab, false);

  EvalArgs ro;
  ro.methods = "grad-cam++";
  auto* r = app.add_subcommand("roc", "Occlusion study over saliency quantiles");
  add_eval_flags(r, ro, true);

  DistillArgs di;
  di.config.learning_rate = 0.02;
  di.config.epochs = 15;
  auto* d = app.add_subcommand("distill", "Train students with and without the saliency loss");
  d->add_option("--teacher", di.teacher, "Teacher checkpoint")->required();
  d->add_option("--data", di.data, "Training dataset")->required();
  d->add_option("--test-data", di.test, "Held-out dataset for test error");
  d->add_option("--method", di.method, "Saliency method in the loss")->capture_default_str();
  d->add_option("--lambda-interpret", di.lambda, "Weight of the saliency loss")->capture_default_str();
  d->add_flag("--kd", di.kd, "Also run rows with the softened-logit loss");
  d->add_option("--temperature", di.temperature, "Softening temperature")->capture_default_str();
  d->add_flag("--raw-maps", di.raw_maps, "Compare maps without min-max scaling");
  add_train_flags(d, di.config);
  d->add_option("--out", di.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*g) cmd_generate(gen);
    if (*t) cmd_train(tr);
    if (*e) cmd_explain(ex);
    if (*v) cmd_evaluate(ev);
    if (*b) cmd_ablate(ab);
    if (*r) cmd_roc(ro);
    if (*d) cmd_distill(di);
  } catch (const IoError& err) {
    spdlog::error("{}", err.what());
    return kIo;
  } catch (const FormatError& err) {
    spdlog::error("{}", err.what());
    return kFormat;
  } catch (const InvalidArgument& err) {
    spdlog::error("{}", err.what());
    return kInvalid;
  } catch (const ShapeError& err) {
    spdlog::error("{}", err.what());
    return kShape;
  } catch (const NumericError& err) {
    spdlog::error("{}", err.what());
    return kNumeric;
  } catch (const fs::filesystem_error& err) {
    spdlog::error("{}", err.what());
    return kIo;
  } catch (const std::exception& err) {
    spdlog::error("internal error: {}", err.what());
    return kInternal;
  }
  return kOk;
}
