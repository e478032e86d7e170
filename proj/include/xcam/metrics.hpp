#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xcam/graph.hpp"
#include "xcam/sample.hpp"
#include "xcam/saliency.hpp"

namespace xcam {

/// Class probability on the full image (Y) and on the explanation map (O).
struct ConfidencePair {
  double full = 0.0;
  double explanation = 0.0;
  std::size_t class_index = 0;
  std::size_t image_id = 0;
};

/// Per-image drop 100 * max(0, Y - O) / Y. Throws on Y == 0.
std::vector<double> confidence_drops(std::span<const ConfidencePair> pairs);
/// Mean of confidence_drops, in [0, 100].
double average_drop(std::span<const ConfidencePair> pairs);
/// 100 * #(O > Y) / N.
double pct_increase_confidence(std::span<const ConfidencePair> pairs);

struct WinSplit {
  double a = 0.0, b = 0.0;
};
/// Share of images on which each method has the strictly smaller drop;
/// exact ties count half to each side.
WinSplit win_pct(std::span<const double> drops_a, std::span<const double> drops_b);

/// internal / (box-union area + external), counting non-zero mask pixels.
double localization_iou(const Tensor& mask, std::span<const BoundingBox> boxes);

/// Empirical quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double theta);

struct RocPoint {
  double theta = 0.0;
  double relative_confidence = 0.0;  // mean of 100 * O / Y
  double area_fraction = 0.0;        // mean share of pixels kept
};

/// Keeps the pixels whose map value reaches the theta-quantile and measures
/// the class probability on the occluded image. `maps` are [H,W] at input
/// resolution; `classes` gives the class scored on each image.
std::vector<RocPoint> occlusion_roc(const ModelGraph& graph, std::span<const Tensor> images,
                                    std::span<const Tensor> maps, std::span<const std::size_t> classes,
                                    std::span<const double> theta_grid);

struct EvalConfig {
  std::vector<Method> methods{Method::grad_cam, Method::grad_cam_pp};
  std::vector<double> deltas{0.0, 0.25, 0.5};
  AlphaRule alpha_rule = AlphaRule::exponential;
  std::vector<double> theta_grid;  // empty: no occlusion study
  std::size_t jobs = 1;
};

struct MethodMetrics {
  Method method = Method::grad_cam_pp;
  double average_drop = 0.0;
  double pct_increase = 0.0;
  std::vector<double> mean_loc;  // parallel to EvalConfig::deltas
  std::vector<RocPoint> roc;
  std::vector<ConfidencePair> pairs;
  std::vector<double> drops;
};

struct WinEntry {
  Method a = Method::grad_cam_pp, b = Method::grad_cam;
  WinSplit split;
};

struct MetricsReport {
  std::size_t num_images = 0;
  std::vector<double> deltas;
  std::string alpha_rule;
  std::vector<MethodMetrics> methods;
  std::vector<WinEntry> wins;  // every unordered pair of methods
};

/// Explains each image for its predicted class and scores the explanation.
/// Localization uses the map for the labelled class and that class's boxes.
MetricsReport evaluate(const ModelGraph& graph, std::span<const Sample> samples, const EvalConfig& config);

std::string report_to_json(const MetricsReport& report, bool per_image = false);
/// Aligned text: one column per method, rows for each metric.
std::string report_table(const MetricsReport& report);
std::string roc_to_csv(const std::vector<RocPoint>& points);

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads. Each index is
/// visited exactly once; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace xcam
