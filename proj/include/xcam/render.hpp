#pragma once

#include <array>

#include "xcam/tensor.hpp"

namespace xcam {

/// Fixed colormap: blue at 0, green at 0.5, red at 1, linear in between.
/// Inputs outside [0,1] are clamped.
std::array<double, 3> colormap(double v);

/// [H,W] saliency in [0,1] mapped through the colormap and blended 50/50
/// over a [3,H,W] image.
Tensor render_heatmap(const Tensor& saliency, const Tensor& image);

}  // namespace xcam
