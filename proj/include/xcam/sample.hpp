#pragma once

#include <cstddef>
#include <vector>

#include "xcam/tensor.hpp"

namespace xcam {

/// Axis-aligned box in pixel coordinates, [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t class_index = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// One labelled image: [3,H,W] with values in [0,1].
struct Sample {
  Tensor image;
  std::size_t label = 0;
  std::vector<BoundingBox> boxes;
  std::size_t instance_count = 0;
  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace xcam
