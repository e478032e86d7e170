#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "xcam/graph.hpp"
#include "xcam/model_zoo.hpp"
#include "xcam/rng.hpp"
#include "xcam/tensor.hpp"

namespace xcam::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline void randomize(ModelGraph& g, Rng& rng, double spread = 0.5) {
  for (auto& l : g.layers) {
    if (!l.has_params()) continue;
    for (auto& v : l.weight.data()) v = rng.uniform(-spread, spread);
    for (auto& v : l.bias.data()) v = rng.uniform(-0.1, 0.1);
  }
}

inline ModelGraph make_graph(std::string name, Shape input, std::size_t classes, std::size_t designated,
                             std::vector<LayerSpec> layers) {
  ModelGraph g;
  g.name = std::move(name);
  g.input_shape = std::move(input);
  g.num_classes = classes;
  g.designated_layer = designated;
  g.layers = std::move(layers);
  return g;
}

// conv-relu-conv-relu-flatten-dense on a [2,6,6] input.
inline ModelGraph small_cnn(std::uint64_t seed, std::size_t classes = 3) {
  auto g = make_graph("small", {2, 6, 6}, classes, 3,
                      {conv2d_layer(2, 3, 3, 1, 1), relu_layer(), conv2d_layer(3, 4, 3), relu_layer(),
                       flatten_layer(), dense_layer(4 * 4 * 4, classes)});
  Rng rng(seed);
  randomize(g, rng);
  g.validate();
  return g;
}

// |a - b| relative to the larger magnitude; differences below `floor` count as 0.
inline double rel_err(double a, double b, double floor = 1e-8) {
  const double d = std::abs(a - b);
  const double m = std::max(std::abs(a), std::abs(b));
  return d <= floor ? 0.0 : d / m;
}

}  // namespace xcam::testing
