#include "osvit/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "osvit/error.hpp"

namespace osvit {

void PreprocessConfig::validate() const {
  for (std::size_t extent :
       {target_dims.depth, target_dims.height, target_dims.width}) {
    if (extent < 2) {
      throw ConfigError("preprocess target extents must be >= 2, got " +
                        target_dims.to_string());
    }
  }
  if (spline_order != 1 && spline_order != 3) {
    throw ConfigError("spline order must be 1 or 3, got " +
                      std::to_string(spline_order));
  }
}

namespace {

const double kPole = std::sqrt(3.0) - 2.0;

std::size_t mirror(std::ptrdiff_t k, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * n - 2);
  k %= period;
  if (k < 0) k += period;
  if (k >= static_cast<std::ptrdiff_t>(n)) k = period - k;
  return static_cast<std::size_t>(k);
}

double cubic_bspline(double t) {
  t = std::abs(t);
  if (t < 1.0) return 2.0 / 3.0 - t * t + 0.5 * t * t * t;
  if (t < 2.0) {
    const double u = 2.0 - t;
    return u * u * u / 6.0;
  }
  return 0.0;
}

// Taps and weights for each output sample along one axis.
struct Stencil {
  std::vector<std::array<std::size_t, 4>> taps;
  std::vector<std::array<double, 4>> weights;
  std::size_t width = 0;
};

Stencil make_stencil(std::size_t n_in, std::size_t n_out, int order) {
  Stencil s;
  s.width = order == 3 ? 4 : 2;
  s.taps.resize(n_out);
  s.weights.resize(n_out);
  const double step = static_cast<double>(n_in - 1) /
                      static_cast<double>(n_out - 1);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double x = j == n_out - 1 ? static_cast<double>(n_in - 1)
                                    : static_cast<double>(j) * step;
    const auto base = static_cast<std::ptrdiff_t>(std::floor(x));
    if (order == 3) {
      for (std::ptrdiff_t t = 0; t < 4; ++t) {
        const std::ptrdiff_t k = base - 1 + t;
        s.taps[j][t] = mirror(k, n_in);
        s.weights[j][t] = cubic_bspline(x - static_cast<double>(k));
      }
    } else {
      const double frac = x - static_cast<double>(base);
      s.taps[j][0] = mirror(base, n_in);
      s.taps[j][1] = mirror(base + 1, n_in);
      s.weights[j][0] = 1.0 - frac;
      s.weights[j][1] = frac;
    }
  }
  return s;
}

// Grid stored as [outer][axis][inner]; resamples the middle axis.
std::vector<double> resample_axis(const std::vector<double>& in,
                                  std::size_t outer, std::size_t n_in,
                                  std::size_t inner, std::size_t n_out,
                                  int order) {
  const Stencil st = make_stencil(n_in, n_out, order);
  std::vector<double> out(outer * n_out * inner);
  std::vector<double> line(n_in);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      for (std::size_t k = 0; k < n_in; ++k) {
        line[k] = in[(o * n_in + k) * inner + i];
      }
      if (order == 3) bspline_prefilter(line);
      for (std::size_t j = 0; j < n_out; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < st.width; ++t) {
          acc += st.weights[j][t] * line[st.taps[j][t]];
        }
        out[(o * n_out + j) * inner + i] = acc;
      }
    }
  }
  return out;
}

}  // namespace

void bspline_prefilter(std::span<double> c) {
  const std::size_t n = c.size();
  if (n < 2) return;
  const double z = kPole;
  const double gain = (1.0 - z) * (1.0 - 1.0 / z);
  for (double& v : c) v *= gain;

  // Causal initialization for the mirror-symmetric extension.
  {
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, static_cast<double>(n - 1));
    double sum = c[0] + z2n * c[n - 1];
    z2n *= z2n * iz;
    for (std::size_t k = 1; k + 1 < n; ++k) {
      sum += (zn + z2n) * c[k];
      zn *= z;
      z2n *= iz;
    }
    c[0] = sum / (1.0 - zn * zn);
  }
  for (std::size_t k = 1; k < n; ++k) c[k] += z * c[k - 1];
  c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
  for (std::size_t k = n - 1; k-- > 0;) c[k] = z * (c[k + 1] - c[k]);
}

Volume spline_downsample(const Volume& volume, Dims target, int order) {
  PreprocessConfig{target, order}.validate();
  const Dims src = volume.dims();
  const std::size_t in_ext[3] = {src.depth, src.height, src.width};
  const std::size_t out_ext[3] = {target.depth, target.height, target.width};
  static const char* kAxis[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (in_ext[a] < 2) {
      throw DimensionError(std::string("source ") + kAxis[a] +
                           " extent must be >= 2");
    }
    if (out_ext[a] > in_ext[a]) {
      throw UnsupportedError(std::string("spline_downsample: target ") +
                             kAxis[a] + " " + std::to_string(out_ext[a]) +
                             " exceeds source " + std::to_string(in_ext[a]) +
                             " (downsampling only)");
    }
  }

  std::vector<double> grid(volume.voxel_count());
  if (volume.type() == VoxelType::kU8) {
    std::copy(volume.u8().begin(), volume.u8().end(), grid.begin());
  } else {
    std::copy(volume.f32().begin(), volume.f32().end(), grid.begin());
  }

  // width, then height, then depth; each pass leaves the other axes intact.
  grid = resample_axis(grid, src.depth * src.height, src.width, 1,
                       target.width, order);
  grid = resample_axis(grid, src.depth, src.height, target.width,
                       target.height, order);
  grid = resample_axis(grid, 1, src.depth, target.height * target.width,
                       target.depth, order);

  std::vector<float> out(grid.begin(), grid.end());
  return Volume(target, std::move(out));
}

Volume quantize_u8(const Volume& volume) {
  const Volume f = volume.to_f32();
  const auto data = f.f32();
  std::vector<std::uint8_t> out(data.size(), 0);
  if (data.empty()) return Volume(f.dims(), std::move(out));
  for (float v : data) {
    if (!std::isfinite(v)) throw NumericError("quantize_u8: non-finite voxel");
  }
  const auto [lo_it, hi_it] = std::minmax_element(data.begin(), data.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (hi > lo) {
    const double scale = 255.0 / (hi - lo);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double q = std::round((static_cast<double>(data[i]) - lo) * scale);
      out[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
    }
  }
  return Volume(f.dims(), std::move(out));
}

Volume preprocess_volume(const Volume& volume, const PreprocessConfig& config) {
  config.validate();
  return quantize_u8(
      spline_downsample(volume, config.target_dims, config.spline_order));
}

}  // namespace osvit
