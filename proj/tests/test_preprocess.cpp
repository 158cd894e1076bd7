#include <doctest.h>

#include <cmath>
#include <vector>

#include "osvit/error.hpp"
#include "osvit/preprocess.hpp"

using namespace osvit;

namespace {

Volume filled(Dims dims, float value) {
  return Volume(dims, std::vector<float>(dims.count(), value));
}

}  // namespace

TEST_CASE("constant volume stays constant") {
  for (int order : {1, 3}) {
    const Volume out = spline_downsample(filled({9, 13, 11}, 7.0f), {4, 5, 6}, order);
    CHECK(out.dims() == Dims{4, 5, 6});
    for (float v : out.f32()) CHECK(v == doctest::Approx(7.0f).epsilon(1e-6));
  }
}

TEST_CASE("linear ramp is reproduced at mapped coordinates") {
  const Dims in{8, 8, 16};
  std::vector<float> data(in.count());
  std::size_t i = 0;
  for (std::size_t d = 0; d < in.depth; ++d) {
    for (std::size_t h = 0; h < in.height; ++h) {
      for (std::size_t w = 0; w < in.width; ++w) data[i++] = static_cast<float>(w);
    }
  }
  const Volume out = spline_downsample(Volume(in, data), {8, 8, 8});
  // Reference cubic zoom with mirror boundaries (scipy.ndimage.zoom, order 3).
  const double reference[8] = {0.0,        2.13498511, 4.28488251, 6.42851301,
                               8.57148699, 10.7151175, 12.8650149, 15.0};
  for (std::size_t d = 0; d < 8; ++d) {
    for (std::size_t h = 0; h < 8; ++h) {
      for (std::size_t w = 0; w < 8; ++w) {
        const double v = out.value(d, h, w);
        const double analytic = w * 15.0 / 7.0;
        const bool near_edge = w == 1 || w == 6;
        CHECK(std::abs(v - reference[w]) <= 1e-5);
        CHECK(std::abs(v - analytic) <= (near_edge ? 1e-2 : 1e-3));
      }
    }
  }
}

TEST_CASE("bspline prefilter interpolates its samples") {
  std::vector<double> signal{3, -1, 4, 1, -5, 9, 2, 6};
  std::vector<double> c = signal;
  bspline_prefilter(c);
  auto at = [&](std::ptrdiff_t k) {
    const auto n = static_cast<std::ptrdiff_t>(c.size());
    if (k < 0) k = -k;
    if (k >= n) k = 2 * (n - 1) - k;
    return c[static_cast<std::size_t>(k)];
  };
  for (std::size_t k = 0; k < signal.size(); ++k) {
    const auto j = static_cast<std::ptrdiff_t>(k);
    const double value = (at(j - 1) + 4.0 * at(j) + at(j + 1)) / 6.0;
    CHECK(value == doctest::Approx(signal[k]).epsilon(1e-10));
  }
}

TEST_CASE("quantize examples") {
  auto q = quantize_u8(Volume({1, 1, 3}, std::vector<float>{0.0f, 0.5f, 1.0f}));
  CHECK(q.type() == VoxelType::kU8);
  CHECK(q.u8()[0] == 0);
  CHECK(q.u8()[1] == 128);
  CHECK(q.u8()[2] == 255);

  q = quantize_u8(Volume({1, 1, 3}, std::vector<float>{-10.0f, 0.0f, 10.0f}));
  CHECK(q.u8()[0] == 0);
  CHECK(q.u8()[1] == 128);
  CHECK(q.u8()[2] == 255);

  const Volume flat = quantize_u8(filled({2, 3, 4}, 42.0f));
  for (auto v : flat.u8()) CHECK(v == 0);
}

TEST_CASE("target extents are validated") {
  CHECK_THROWS(spline_downsample(filled({4, 4, 4}, 1.0f), {5, 4, 4}));
  PreprocessConfig bad;
  bad.spline_order = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("full-size volume to the default target") {
  const Dims raw{155, 240, 240};
  const PreprocessConfig config;

  const Volume constant = preprocess_volume(filled(raw, 3.0f), config);
  CHECK(constant.dims() == Dims{50, 64, 64});
  for (auto v : constant.u8()) CHECK(v == 0);

  // Bright 40-voxel cube in the middle of a dark field.
  std::vector<float> data(raw.count(), 0.0f);
  const std::size_t lo[3] = {57, 100, 100};
  for (std::size_t d = lo[0]; d < lo[0] + 40; ++d) {
    for (std::size_t h = lo[1]; h < lo[1] + 40; ++h) {
      for (std::size_t w = lo[2]; w < lo[2] + 40; ++w) {
        data[(d * raw.height + h) * raw.width + w] = 1000.0f;
      }
    }
  }
  const Volume cube(raw, std::move(data));
  const Volume a = preprocess_volume(cube, config);
  const Volume b = preprocess_volume(cube, config);
  CHECK(a == b);

  std::size_t bright = 0;
  for (auto v : a.u8()) bright += v > 200;
  const double expected =
      (40.0 / (239.0 / 63.0)) * (40.0 / (239.0 / 63.0)) * (40.0 / (154.0 / 49.0));
  CHECK(std::abs(bright - expected) / expected < 0.25);
}
