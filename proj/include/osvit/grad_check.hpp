#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "osvit/tensor.hpp"

namespace osvit {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates whose analytic and numeric values are both within this bound
  // are zero-gradient coordinates: they must agree to it absolutely and are
  // left out of max_relative_error. Negative means step².
  double absolute_tolerance = -1.0;
  // Inputs larger than this are checked on a random subset of coordinates.
  std::size_t max_coords_per_input = 16;
  std::uint64_t seed = 0;
};

struct GradCheckCoord {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
  bool zero = false;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckCoord> coords;
  double max_relative_error = 0.0;  // over nonzero coordinates
  std::size_t zero_coords = 0;
  bool passed = true;
};

// Scalar-valued function of f64 tensors, built from differentiable ops.
using ScalarFn = std::function<Tensor64(std::span<const Tensor64>)>;

// Compares tape gradients of f against central differences
// (f(x + h e) - f(x - h e)) / 2h. Relative error is
// |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const ScalarFn& f, std::span<const Tensor64> inputs,
                           const GradCheckOptions& options = {});

}  // namespace osvit
