#include "xcam/render.hpp"

#include <algorithm>

#include "xcam/error.hpp"

namespace xcam {

std::array<double, 3> colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  if (v < 0.5) return {0.0, 2.0 * v, 1.0 - 2.0 * v};
  return {2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0};
}

Tensor render_heatmap(const Tensor& saliency, const Tensor& image) {
  if (saliency.rank() != 2 || image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != saliency.dim(0) ||
      image.dim(2) != saliency.dim(1))
    throw ShapeError("heatmap " + shape_string(saliency.shape()) + " does not align with image " +
                     shape_string(image.shape()));
  Tensor out(image.shape());
  const std::size_t hw = saliency.size();
  for (std::size_t p = 0; p < hw; ++p) {
    const auto rgb = colormap(saliency[p]);
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + p] = 0.5 * image[c * hw + p] + 0.5 * rgb[c];
  }
  return out;
}

}  // namespace xcam
