#include "xcam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "xcam/error.hpp"
#include "xcam/kernels.hpp"
#include "xcam/model_zoo.hpp"

namespace xcam {

namespace {

struct ImageRoc {
  std::vector<double> relative;
  std::vector<double> area;
};

void check_theta_grid(std::span<const double> thetas) {
  if (thetas.empty()) throw InvalidArgument("theta grid is empty");
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    if (!(thetas[i] >= 0.0 && thetas[i] <= 1.0)) throw InvalidArgument("theta values must lie in [0, 1]");
    if (i > 0 && thetas[i] < thetas[i - 1]) throw InvalidArgument("theta grid must be sorted");
  }
}

ImageRoc roc_single(const ModelGraph& graph, const Tensor& image, const Tensor& map, std::size_t c, double full,
                    std::span<const double> thetas) {
  if (map.rank() != 2 || image.rank() != 3 || map.dim(0) != image.dim(1) || map.dim(1) != image.dim(2))
    throw ShapeError("occlusion map " + shape_string(map.shape()) + " does not align with image " +
                     shape_string(image.shape()));
  ImageRoc out;
  for (double theta : thetas) {
    const double gamma = quantile(map.values(), theta);
    Tensor keep(map.shape());
    std::size_t kept = 0;
    for (std::size_t p = 0; p < map.size(); ++p)
      if (!(map[p] < gamma)) {
        keep[p] = 1.0;
        ++kept;
      }
    const double o = predict(graph, explanation_map(keep, image)).probabilities[c];
    out.relative.push_back(100.0 * (o / full));  // exactly 100 when o == full
    out.area.push_back(static_cast<double>(kept) / static_cast<double>(map.size()));
  }
  return out;
}

std::vector<RocPoint> average_roc(const std::vector<ImageRoc>& per_image, std::span<const double> thetas) {
  std::vector<RocPoint> out;
  for (std::size_t t = 0; t < thetas.size(); ++t) {
    RocPoint p{thetas[t], 0.0, 0.0};
    for (const auto& r : per_image) {
      p.relative_confidence += r.relative[t];
      p.area_fraction += r.area[t];
    }
    p.relative_confidence /= static_cast<double>(per_image.size());
    p.area_fraction /= static_cast<double>(per_image.size());
    out.push_back(p);
  }
  return out;
}

std::vector<BoundingBox> boxes_for(const Sample& s, std::size_t c) {
  std::vector<BoundingBox> out;
  for (const auto& b : s.boxes)
    if (b.class_index == c) out.push_back(b);
  return out;
}

}  // namespace

std::vector<double> confidence_drops(std::span<const ConfidencePair> pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!(p.full > 0.0))
      throw InvalidArgument("full-image confidence is zero for image " + std::to_string(p.image_id));
    out.push_back(std::max(0.0, p.full - p.explanation) / p.full * 100.0);
  }
  return out;
}

double average_drop(std::span<const ConfidencePair> pairs) {
  if (pairs.empty()) throw InvalidArgument("average drop of an empty set");
  const auto drops = confidence_drops(pairs);
  double total = 0.0;
  for (double d : drops) total += d;
  return total / static_cast<double>(drops.size());
}

double pct_increase_confidence(std::span<const ConfidencePair> pairs) {
  if (pairs.empty()) throw InvalidArgument("confidence increase of an empty set");
  const auto n = std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.explanation > p.full; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(pairs.size());
}

WinSplit win_pct(std::span<const double> drops_a, std::span<const double> drops_b) {
  if (drops_a.size() != drops_b.size())
    throw InvalidArgument("win % needs equal-length drop lists, got " + std::to_string(drops_a.size()) + " and " +
                          std::to_string(drops_b.size()));
  if (drops_a.empty()) throw InvalidArgument("win % of an empty set");
  // Count in half-wins so both shares come from one integer total.
  std::size_t half_a = 0;
  for (std::size_t i = 0; i < drops_a.size(); ++i) {
    if (drops_a[i] < drops_b[i])
      half_a += 2;
    else if (drops_a[i] == drops_b[i])
      half_a += 1;
  }
  const std::size_t total = 2 * drops_a.size();
  // The larger share is at least 50, so 100 minus it is exact and the two
  // shares sum to exactly 100.
  const std::size_t major = std::max(half_a, total - half_a);
  const double big = 100.0 * static_cast<double>(major) / static_cast<double>(total);
  return 2 * half_a >= total ? WinSplit{big, 100.0 - big} : WinSplit{100.0 - big, big};
}

double localization_iou(const Tensor& mask, std::span<const BoundingBox> boxes) {
  if (mask.rank() != 2) throw ShapeError("mask must be [H,W], got " + shape_string(mask.shape()));
  if (boxes.empty()) throw InvalidArgument("localization needs at least one box");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::size_t box_area = 0, internal = 0, external = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool in_box = std::any_of(boxes.begin(), boxes.end(), [&](const BoundingBox& b) {
        return b.contains(static_cast<int>(x), static_cast<int>(y));
      });
      const bool on = mask.at(y, x) != 0.0;
      if (in_box) ++box_area;
      if (on && in_box) ++internal;
      if (on && !in_box) ++external;
    }
  const std::size_t den = box_area + external;
  return den == 0 ? 0.0 : static_cast<double>(internal) / static_cast<double>(den);
}

double quantile(std::vector<double> values, double theta) {
  if (values.empty()) throw InvalidArgument("quantile of an empty set");
  if (!(theta >= 0.0 && theta <= 1.0)) throw InvalidArgument("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = theta * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(lo);
  return frac == 0.0 ? values[lo] : values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::vector<RocPoint> occlusion_roc(const ModelGraph& graph, std::span<const Tensor> images,
                                    std::span<const Tensor> maps, std::span<const std::size_t> classes,
                                    std::span<const double> theta_grid) {
  check_theta_grid(theta_grid);
  if (images.empty()) throw InvalidArgument("occlusion study needs at least one image");
  if (maps.size() != images.size() || classes.size() != images.size())
    throw InvalidArgument("images, maps and classes must have equal counts");
  std::vector<ImageRoc> per_image;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double full = predict(graph, images[i]).probabilities[classes[i]];
    per_image.push_back(roc_single(graph, images[i], maps[i], classes[i], full, theta_grid));
  }
  return average_roc(per_image, theta_grid);
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (failure || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

MetricsReport evaluate(const ModelGraph& graph, std::span<const Sample> samples, const EvalConfig& config) {
  if (samples.empty()) throw InvalidArgument("evaluation set is empty");
  if (config.methods.empty()) throw InvalidArgument("no methods to evaluate");
  for (double d : config.deltas)
    if (!(d >= 0.0 && d <= 1.0)) throw InvalidArgument("threshold values must lie in [0, 1]");
  if (!config.theta_grid.empty()) check_theta_grid(config.theta_grid);

  const std::size_t n = samples.size(), nm = config.methods.size(), nd = config.deltas.size();
  std::vector<std::vector<ConfidencePair>> pairs(nm, std::vector<ConfidencePair>(n));
  std::vector<std::vector<std::vector<double>>> loc(nm, std::vector<std::vector<double>>(nd, std::vector<double>(n)));
  std::vector<std::vector<ImageRoc>> rocs(nm, std::vector<ImageRoc>(n));

  parallel_for(n, config.jobs, [&](std::size_t i) {
    const Sample& s = samples[i];
    GradientTape tape = forward(graph, s.image);
    const Tensor probs = kernels::softmax(tape.scores());
    const std::size_t c = tape.scores().argmax();
    const auto boxes = boxes_for(s, s.label);
    for (std::size_t m = 0; m < nm; ++m) {
      ExplainOptions opt{config.methods[m], config.alpha_rule, c};
      const Explanation ex = explain(graph, tape, opt);
      const Tensor up = upsampled_map(graph, ex.map);
      const double o = predict(graph, explanation_map(up, s.image)).probabilities[c];
      pairs[m][i] = {probs[c], o, c, i};

      Tensor loc_map = up;
      if (s.label != c) {
        opt.class_index = s.label;
        loc_map = upsampled_map(graph, explain(graph, tape, opt).map);
      }
      for (std::size_t d = 0; d < nd; ++d)
        loc[m][d][i] = boxes.empty() ? 0.0 : localization_iou(normalize_threshold(loc_map, config.deltas[d]), boxes);
      if (!config.theta_grid.empty()) rocs[m][i] = roc_single(graph, s.image, up, c, probs[c], config.theta_grid);
    }
  });

  MetricsReport report;
  report.num_images = n;
  report.deltas = config.deltas;
  report.alpha_rule = std::string(to_string(config.alpha_rule));
  for (std::size_t m = 0; m < nm; ++m) {
    MethodMetrics mm;
    mm.method = config.methods[m];
    mm.pairs = pairs[m];
    mm.drops = confidence_drops(mm.pairs);
    mm.average_drop = average_drop(mm.pairs);
    mm.pct_increase = pct_increase_confidence(mm.pairs);
    for (std::size_t d = 0; d < nd; ++d) {
      double total = 0.0;
      for (double v : loc[m][d]) total += v;
      mm.mean_loc.push_back(total / static_cast<double>(n));
    }
    if (!config.theta_grid.empty()) mm.roc = average_roc(rocs[m], config.theta_grid);
    report.methods.push_back(std::move(mm));
  }
  for (std::size_t a = 0; a < nm; ++a)
    for (std::size_t b = a + 1; b < nm; ++b)
      report.wins.push_back({report.methods[a].method, report.methods[b].method,
                             win_pct(report.methods[a].drops, report.methods[b].drops)});
  return report;
}

std::string report_to_json(const MetricsReport& report, bool per_image) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["num_images"] = report.num_images;
  j["alpha_rule"] = report.alpha_rule;
  j["deltas"] = report.deltas;
  ordered_json methods = ordered_json::array();
  for (const auto& m : report.methods) {
    ordered_json e;
    e["method"] = to_string(m.method);
    e["average_drop_pct"] = m.average_drop;
    e["pct_increase_confidence"] = m.pct_increase;
    ordered_json locs = ordered_json::array();
    for (std::size_t d = 0; d < m.mean_loc.size(); ++d)
      locs.push_back({{"delta", report.deltas[d]}, {"mean_loc", m.mean_loc[d]}});
    e["localization"] = std::move(locs);
    if (!m.roc.empty()) {
      ordered_json roc = ordered_json::array();
      for (const auto& p : m.roc)
        roc.push_back(
            {{"theta", p.theta}, {"relative_confidence", p.relative_confidence}, {"area_fraction", p.area_fraction}});
      e["roc"] = std::move(roc);
    }
    if (per_image) {
      ordered_json imgs = ordered_json::array();
      for (std::size_t i = 0; i < m.pairs.size(); ++i)
        imgs.push_back({{"image", m.pairs[i].image_id},
                        {"class", m.pairs[i].class_index},
                        {"full", m.pairs[i].full},
                        {"explanation", m.pairs[i].explanation},
                        {"drop", m.drops[i]}});
      e["per_image"] = std::move(imgs);
    }
    methods.push_back(std::move(e));
  }
  j["methods"] = std::move(methods);
  ordered_json wins = ordered_json::array();
  for (const auto& w : report.wins)
    wins.push_back({{"a", to_string(w.a)}, {"b", to_string(w.b)}, {"win_pct_a", w.split.a}, {"win_pct_b", w.split.b}});
  j["win_pct"] = std::move(wins);
  return j.dump(2) + "\n";
}

std::string report_table(const MetricsReport& report) {
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> cells;  // per row, per method
  const std::size_t nm = report.methods.size();
  auto add_row = [&](std::string label, auto value_of) {
    labels.push_back(std::move(label));
    std::vector<std::string> row;
    for (std::size_t m = 0; m < nm; ++m) row.push_back(value_of(m));
    cells.push_back(std::move(row));
  };
  add_row("Average Drop %", [&](std::size_t m) { return fmt::format("{:.2f}", report.methods[m].average_drop); });
  add_row("% Incr. in Confidence", [&](std::size_t m) { return fmt::format("{:.2f}", report.methods[m].pct_increase); });
  for (const auto& w : report.wins)
    add_row(fmt::format("Win % ({} vs {})", to_string(w.a), to_string(w.b)), [&](std::size_t m) {
      if (report.methods[m].method == w.a) return fmt::format("{:.2f}", w.split.a);
      if (report.methods[m].method == w.b) return fmt::format("{:.2f}", w.split.b);
      return std::string("-");
    });
  for (std::size_t d = 0; d < report.deltas.size(); ++d)
    add_row(fmt::format("mLoc (delta={:g})", report.deltas[d]),
            [&](std::size_t m) { return fmt::format("{:.4f}", report.methods[m].mean_loc[d]); });

  std::size_t label_w = 6;
  for (const auto& l : labels) label_w = std::max(label_w, l.size());
  std::vector<std::size_t> col_w(nm);
  for (std::size_t m = 0; m < nm; ++m) {
    col_w[m] = to_string(report.methods[m].method).size();
    for (const auto& row : cells) col_w[m] = std::max(col_w[m], row[m].size());
  }
  std::string out = fmt::format("{:<{}}", "Metric", label_w);
  for (std::size_t m = 0; m < nm; ++m) out += fmt::format("  {:>{}}", to_string(report.methods[m].method), col_w[m]);
  out += "\n";
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out += fmt::format("{:<{}}", labels[r], label_w);
    for (std::size_t m = 0; m < nm; ++m) out += fmt::format("  {:>{}}", cells[r][m], col_w[m]);
    out += "\n";
  }
  return out;
}

std::string roc_to_csv(const std::vector<RocPoint>& points) {
  std::string out = "theta,relative_confidence,area_fraction\n";
  for (const auto& p : points)
    out += fmt::format("{},{},{}\n", p.theta, p.relative_confidence, p.area_fraction);
  return out;
}

}  // namespace xcam
