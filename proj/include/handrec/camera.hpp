#pragma once

#include "handrec/errors.hpp"
#include "handrec/ops.hpp"
#include "handrec/tensor.hpp"

namespace handrec::cam {

// Weak-perspective camera: pixel = s * (x, y) + t. Depth only orders
// geometry; it never affects the projection.
struct Camera {
  double s = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

// points: [n, 3] -> [n, 2] pixel coordinates. Differentiable in points.
inline ad::Tensor project(const ad::Tensor& points, const Camera& camera) {
  if (points.rank() != 2 || points.cols() != 3)
    throw ContractError("project: points must be [n, 3], got " + ad::shape_str(points.shape));
  ad::Tensor t({2}, {camera.tx, camera.ty});
  return ad::add_rowvec(ad::scale(ad::slice_cols(points, 0, 2), camera.s), t);
}

// Pixel coordinates -> [-1, 1] sampling coordinates, align-corners: pixel 0
// maps to -1 and pixel (size - 1) maps to +1. Shared by every feature map
// regardless of its resolution.
inline ad::Tensor pixels_to_normalized(const ad::Tensor& pixels, int image_size) {
  if (image_size < 2) throw ContractError("pixels_to_normalized: image_size must be >= 2");
  return ad::add_scalar(ad::scale(pixels, 2.0 / double(image_size - 1)), -1.0);
}

}  // namespace handrec::cam
