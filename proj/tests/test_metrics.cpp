#include <doctest.h>

#include <algorithm>
#include <atomic>

#include <json.hpp>

#include "support.hpp"
#include "xcam/error.hpp"
#include "xcam/metrics.hpp"
#include "xcam/synth_data.hpp"

using namespace xcam;
using namespace xcam::testing;

namespace {

// Pixel-by-pixel count over the whole mask.
double brute_iou(const Tensor& mask, const std::vector<BoundingBox>& boxes) {
  double inside = 0, outside = 0, area = 0;
  for (int y = 0; y < static_cast<int>(mask.dim(0)); ++y)
    for (int x = 0; x < static_cast<int>(mask.dim(1)); ++x) {
      bool in = false;
      for (const auto& b : boxes) in = in || b.contains(x, y);
      const bool on = mask.at(y, x) != 0.0;
      area += in;
      inside += in && on;
      outside += !in && on;
    }
  return inside / (area + outside);
}

}  // namespace

TEST_SUITE("eval-metrics") {
  TEST_CASE("average drop") {
    const std::vector<ConfidencePair> one{{0.8, 0.4}};
    CHECK(average_drop(one) == 50.0);
    const std::vector<ConfidencePair> two{{0.8, 0.4}, {0.5, 0.6}};
    CHECK(average_drop(two) == 25.0);
    const std::vector<ConfidencePair> same{{0.3, 0.3}, {0.9, 0.9}};
    CHECK(average_drop(same) == 0.0);
    const std::vector<ConfidencePair> zero{{0.0, 0.1}};
    CHECK_THROWS_AS(average_drop(zero), InvalidArgument);
    CHECK_THROWS_AS(average_drop({}), InvalidArgument);
  }

  TEST_CASE("average drop stays in [0, 100]") {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
      std::vector<ConfidencePair> pairs;
      for (int i = 0; i < 10; ++i) pairs.push_back({rng.uniform(1e-6, 1.0), rng.uniform(0.0, 1.0)});
      const double d = average_drop(pairs);
      CHECK(d >= 0.0);
      CHECK(d <= 100.0);
    }
  }

  TEST_CASE("percent increase in confidence") {
    const std::vector<ConfidencePair> two{{0.8, 0.4}, {0.5, 0.6}};
    CHECK(pct_increase_confidence(two) == 50.0);
    const std::vector<ConfidencePair> down{{0.8, 0.4}, {0.5, 0.1}};
    CHECK(pct_increase_confidence(down) == 0.0);
    const std::vector<ConfidencePair> tie{{0.5, 0.5}};
    CHECK(pct_increase_confidence(tie) == 0.0);
  }

  TEST_CASE("win percentage") {
    auto win = [](std::vector<double> a, std::vector<double> b) { return win_pct(a, b); };
    auto w = win({10, 20}, {20, 10});
    CHECK(w.a == 50.0);
    CHECK(w.b == 50.0);
    w = win({3, 4, 5}, {3, 4, 5});
    CHECK(w.a == 50.0);
    w = win({1, 2}, {3, 4});
    CHECK(w.a == 100.0);
    CHECK(w.b == 0.0);
    CHECK_THROWS_AS(win({1}, {1, 2}), InvalidArgument);
    CHECK_THROWS_AS(win({}, {}), InvalidArgument);
  }

  TEST_CASE("localization examples") {
    const std::vector<BoundingBox> box{{1, 1, 3, 3, 0}};
    Tensor fill({4, 4});
    for (int y = 1; y < 3; ++y)
      for (int x = 1; x < 3; ++x) fill.at(y, x) = 1.0;
    CHECK(localization_iou(fill, box) == 1.0);

    Tensor half({4, 4});
    half.at(1, 1) = half.at(1, 2) = 1.0;
    half.at(0, 0) = half.at(3, 3) = 0.5;
    CHECK(localization_iou(half, box) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(localization_iou(Tensor({4, 4}), box) == 0.0);
    CHECK_THROWS_AS(localization_iou(fill, {}), InvalidArgument);
  }

  TEST_CASE("localization equals 1 only for the box-union indicator") {
    const std::vector<BoundingBox> boxes{{0, 0, 2, 2, 0}, {1, 1, 4, 3, 0}};
    Tensor ind({4, 5});
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) ind.at(y, x) = (boxes[0].contains(x, y) || boxes[1].contains(x, y)) ? 1.0 : 0.0;
    CHECK(localization_iou(ind, boxes) == 1.0);
    ind.at(3, 4) = 1.0;
    CHECK(localization_iou(ind, boxes) < 1.0);
  }

  TEST_CASE("localization matches a brute-force count on 100 random masks") {
    Rng rng(77);
    for (int t = 0; t < 100; ++t) {
      const std::size_t h = 4 + rng.below(10), w = 4 + rng.below(10);
      Tensor mask({h, w});
      for (auto& v : mask.data()) v = rng.uniform() < 0.4 ? rng.uniform(0.01, 1.0) : 0.0;
      std::vector<BoundingBox> boxes;
      for (std::size_t k = 0; k < 1 + rng.below(3); ++k) {
        const int x0 = static_cast<int>(rng.below(w - 1)), y0 = static_cast<int>(rng.below(h - 1));
        const int x1 = x0 + 1 + static_cast<int>(rng.below(w - x0)), y1 = y0 + 1 + static_cast<int>(rng.below(h - y0));
        boxes.push_back({x0, y0, std::min<int>(x1, w), std::min<int>(y1, h), 0});
      }
      const double got = localization_iou(mask, boxes);
      CHECK(got == brute_iou(mask, boxes));
      CHECK(got >= 0.0);
      CHECK(got <= 1.0);
    }
  }

  TEST_CASE("quantile") {
    CHECK(quantile({3, 1, 2}, 0.0) == 1.0);
    CHECK(quantile({3, 1, 2}, 1.0) == 3.0);
    CHECK(quantile({3, 1, 2}, 0.5) == 2.0);
    CHECK(quantile({0, 10}, 0.25) == 2.5);
    CHECK_THROWS_AS(quantile({}, 0.5), InvalidArgument);
    CHECK_THROWS_AS(quantile({1}, 1.5), InvalidArgument);
  }

  TEST_CASE("theta 0.5 keeps exactly the top half of distinct values") {
    std::vector<double> v{0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4};
    const double gamma = quantile(v, 0.5);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    std::size_t kept = 0;
    for (double x : v) {
      if (x >= gamma) {
        ++kept;
        CHECK(x >= sorted[4]);
      }
    }
    CHECK(kept == 4);
  }

  TEST_CASE("occlusion ROC on an untrained model") {
    const auto g = build_model("gap_cam", 5);
    const auto ds = generate(3, 4, 32, 0.0);
    std::vector<Tensor> images, maps;
    std::vector<std::size_t> classes;
    for (const auto& s : ds.samples) {
      const auto ex = explain(g, s.image, {});
      images.push_back(s.image);
      maps.push_back(upsampled_map(g, ex.map));
      classes.push_back(ex.class_index);
    }
    std::vector<double> grid;
    for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
    const auto roc = occlusion_roc(g, images, maps, classes, grid);
    REQUIRE(roc.size() == 11);
    CHECK(roc[0].relative_confidence == 100.0);
    CHECK(roc[0].area_fraction == 1.0);
    for (std::size_t i = 1; i < roc.size(); ++i) CHECK(roc[i].area_fraction <= roc[i - 1].area_fraction);
    CHECK_THROWS_AS(occlusion_roc(g, images, maps, classes, {}), InvalidArgument);
    const std::vector<double> unsorted{0.5, 0.2};
    CHECK_THROWS_AS(occlusion_roc(g, images, maps, classes, unsorted), InvalidArgument);
    CHECK(roc_to_csv(roc).rfind("theta,relative_confidence,area_fraction\n0,100,1\n", 0) == 0);
  }

  TEST_CASE("evaluate report structure") {
    const auto g = build_model("student", 2);
    const auto ds = generate(4, 12, 32, 0.5, "val");
    EvalConfig cfg;
    cfg.deltas = {0.0, 0.25, 0.5};
    const auto r = evaluate(g, ds.samples, cfg);
    CHECK(r.num_images == 12);
    REQUIRE(r.methods.size() == 2);
    REQUIRE(r.wins.size() == 1);
    CHECK(r.wins[0].split.a + r.wins[0].split.b == 100.0);
    for (const auto& m : r.methods) {
      CHECK(m.mean_loc.size() == 3);
      CHECK(m.average_drop >= 0.0);
      CHECK(m.average_drop <= 100.0);
      CHECK(m.pct_increase >= 0.0);
      CHECK(m.pct_increase <= 100.0);
    }
    const auto j = nlohmann::json::parse(report_to_json(r));
    CHECK(j["methods"].size() == 2);
    const std::string table = report_table(r);
    CHECK(table.find("Average Drop %") != std::string::npos);
    CHECK(table.find("delta=0.25") != std::string::npos);

    cfg.jobs = 3;
    CHECK(report_to_json(evaluate(g, ds.samples, cfg), true) == report_to_json(evaluate(g, ds.samples, {}), true));
    CHECK_THROWS_AS(evaluate(g, {}, cfg), InvalidArgument);
  }

  TEST_CASE("parallel_for visits each index once and rethrows") {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(10, 3,
                                 [](std::size_t i) {
                                   if (i == 7) throw NumericError("boom");
                                 }),
                    NumericError);
  }
}
