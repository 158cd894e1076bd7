#pragma once

#include <span>
#include <vector>

#include "osvit/volume_io.hpp"

namespace osvit {

struct PreprocessConfig {
  Dims target_dims{50, 64, 64};
  // 3 = cubic B-spline with interpolating prefilter, 1 = trilinear.
  int spline_order = 3;

  void validate() const;
};

// Resamples each axis at x_in = x_out * (N_in - 1) / (N_out - 1)
// (corner-aligned) using a tensor-product B-spline interpolant with
// mirror-reflected boundaries. Target extents may not exceed the source.
Volume spline_downsample(const Volume& volume, Dims target, int order = 3);

// Cubic B-spline interpolation coefficients of a 1-D signal under
// mirror-symmetric extension, in place.
void bspline_prefilter(std::span<double> signal);

// round((v - min) / (max - min) * 255), half away from zero; all zeros when
// the volume is constant.
Volume quantize_u8(const Volume& volume);

// quantize_u8(spline_downsample(v)).
Volume preprocess_volume(const Volume& volume, const PreprocessConfig& config);

}  // namespace osvit
