#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "osvit/error.hpp"
#include "osvit/model.hpp"
#include "osvit/ops.hpp"
#include "support.hpp"

using namespace osvit;
using osvit::testing::param_slots;
using osvit::testing::random_tensor;
using osvit::testing::tiny_model_config;

namespace {

bool bitwise_equal(const ModelParams& a, const ModelParams& b,
                   const ModelConfig& config) {
  const auto x = a.named(config);
  const auto y = b.named(config);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].name != y[i].name || x[i].tensor.shape() != y[i].tensor.shape()) {
      return false;
    }
    if (std::memcmp(x[i].tensor.data().data(), y[i].tensor.data().data(),
                    x[i].tensor.numel() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

void fill(Tensor& t, float value) {
  for (auto& x : t.data()) x = value;
}

}  // namespace

TEST_CASE("patch geometry of the default config") {
  const ModelConfig config;
  CHECK(config.num_patches() == 640);
  CHECK(config.patch_volume() == 320);
  CHECK(config.patch_grid() == Dims{10, 8, 8});
}

TEST_CASE("patchify index arithmetic") {
  const ModelConfig config;
  const Dims in = config.input_dims;
  std::vector<float> data(in.count());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i);
  const auto patches = patchify(Tensor({1, in.depth, in.height, in.width}, data), config);
  CHECK(patches.shape() == Shape{1, 640, 320});

  const auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
    return static_cast<float>((d * in.height + h) * in.width + w);
  };
  CHECK(patches.at({0, 72, 147}) == at(7, 10, 3));

  for (std::size_t d = 0; d < in.depth; ++d) {
    for (std::size_t h = 0; h < in.height; ++h) {
      for (std::size_t w = 0; w < in.width; ++w) {
        const std::size_t p = (d / 5) * 64 + (h / 8) * 8 + (w / 8);
        const std::size_t o = ((d % 5) * 8 + (h % 8)) * 8 + (w % 8);
        if (patches.data()[p * 320 + o] != at(d, h, w)) {
          FAIL("voxel misplaced at " << d << "," << h << "," << w);
        }
      }
    }
  }

  const auto constant = patchify(Tensor::full({1, 50, 64, 64}, 0.25f), config);
  for (float v : constant.data()) CHECK(v == 0.25f);
}

TEST_CASE("embedding") {
  const ModelConfig config;
  Rng rng(3);
  const auto patches = random_tensor<float>({2, 640, 320}, rng);

  const auto zero = ModelParams::zeros(config);
  const auto seq = embed(patches, zero, config);
  CHECK(seq.shape() == Shape{2, 641, 192});
  for (float v : seq.data()) CHECK(v == 0.0f);

  auto params = init_params(config, 1);
  fill(params.pos_embedding, 0.0f);
  const auto same = embed(Tensor::full({1, 640, 320}, 0.5f), params, config);
  for (std::size_t p = 2; p <= 640; ++p) {
    for (std::size_t c = 0; c < 192; ++c) {
      REQUIRE(same.at({0, p, c}) == same.at({0, 1, c}));
    }
  }
}

TEST_CASE("encoder layer with zero residual branches is the identity") {
  const ModelConfig config = tiny_model_config();
  const auto params = ModelParams::zeros(config);
  auto layer = params.layers[0];
  fill(layer.ln1_gamma, 1.0f);
  fill(layer.ln2_gamma, 1.0f);
  Rng rng(4);
  const auto x = random_tensor<float>({2, 5, config.embed_dim}, rng);
  const auto y = encoder_layer(x, layer, config);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("single-token attention is a value then output projection") {
  const ModelConfig config = tiny_model_config();
  auto params = init_params(config, 2).cast<double>(config);
  auto layer = params.layers[0];
  for (auto* t : {&layer.w1, &layer.b1, &layer.w2, &layer.b2}) {
    for (auto& v : t->data()) v = 0.0;
  }
  Rng rng(5);
  for (auto* t : {&layer.bv, &layer.bo, &layer.ln1_beta}) {
    for (auto& v : t->data()) v = rng.uniform(-0.5, 0.5);
  }
  const auto x = random_tensor<double>({1, 1, config.embed_dim}, rng);
  const auto y = encoder_layer(x, layer, config);

  const auto n = ops::layer_norm(x, layer.ln1_gamma, layer.ln1_beta,
                                 config.layer_norm_eps);
  const auto v = ops::add(ops::matmul(n, layer.wv), layer.bv);
  const auto expected = ops::add(x, ops::add(ops::matmul(v, layer.wo), layer.bo));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("head with zero weights returns its bias") {
  const ModelConfig config = tiny_model_config();
  auto params = init_params(config, 3);
  fill(params.head_weight, 0.0f);
  params.head_bias.data()[0] = 0.5f;
  params.head_bias.data()[1] = -1.0f;
  params.head_bias.data()[2] = 2.0f;
  Rng rng(6);
  const auto volumes = random_tensor<float>({3, 10, 16, 16}, rng, 0, 1);
  const std::vector<float> ages{40, 60, 80};
  const auto logits = forward(volumes, ages, params, config);
  CHECK(logits.shape() == Shape{3, 3});
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(logits.at({b, 0}) == 0.5f);
    CHECK(logits.at({b, 1}) == -1.0f);
    CHECK(logits.at({b, 2}) == 2.0f);
  }
}

TEST_CASE("age reaches the logits") {
  const ModelConfig config = tiny_model_config();
  auto params = init_params(config, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    params.head_weight.at({config.embed_dim, c}) = 0.3f * (c + 1);
  }
  Rng rng(7);
  const auto volume = random_tensor<float>({1, 10, 16, 16}, rng, 0, 1);
  const std::vector<float> sixty{60.0f};
  const std::vector<float> seventy{70.0f};
  const auto a = forward(volume, sixty, params, config);
  const auto b = forward(volume, seventy, params, config);
  bool differs = false;
  for (std::size_t i = 0; i < 3; ++i) differs |= a.data()[i] != b.data()[i];
  CHECK(differs);
}

TEST_CASE("default forward shapes") {
  const ModelConfig config;
  const auto params = init_params(config, 5);
  ForwardTrace trace;
  const std::vector<float> ages{65.0f};
  const auto logits = forward(Tensor::full({1, 50, 64, 64}, 0.3f), ages, params,
                              config, &trace);
  CHECK(trace.patches == Shape{1, 640, 320});
  CHECK(trace.sequence == Shape{1, 641, 192});
  CHECK(trace.encoded == Shape{1, 641, 192});
  CHECK(trace.class_feature == Shape{1, 192});
  CHECK(trace.fused == Shape{1, 193});
  CHECK(logits.shape() == Shape{1, 3});
  CHECK_THROWS_AS(forward(Tensor::full({1, 40, 64, 64}, 0.3f), ages, params, config),
                  DimensionError);
}

TEST_CASE("initialization") {
  const ModelConfig config;
  const auto a = init_params(config, 9);
  const auto b = init_params(config, 9);
  CHECK(bitwise_equal(a, b, config));
  CHECK_FALSE(bitwise_equal(a, init_params(config, 10), config));

  for (const auto& [name, t] : a.named(config)) {
    for (float v : t.data()) {
      if (std::abs(v) > 0.04f && name.find("gamma") == std::string::npos) {
        FAIL(name << " holds " << v);
      }
    }
  }

  const std::size_t e = 192, p = 320, n = 641, m = 1536;
  const std::size_t layer = 2 * e + 4 * (e * e + e) + 2 * e + (e * m + m) + (m * e + e);
  const std::size_t expected = (e * p + e) + e + n * e + 2 * layer + 2 * e +
                               2 * (e + 1) + (e + 1) * 3 + 3;
  CHECK(param_count(config) == expected);
  std::size_t counted = 0;
  for (const auto& t : a.named(config)) counted += t.tensor.numel();
  CHECK(counted == expected);
}

TEST_CASE("checkpoint round trip and validation") {
  const ModelConfig config = tiny_model_config();
  const auto params = init_params(config, 11);
  osvit::testing::TempDir dir("ckpt");
  save_checkpoint(params, config, dir.path() / "m.osvt");
  const auto [loaded, loaded_config] = load_checkpoint(dir.path() / "m.osvt");
  CHECK(loaded_config == config);
  CHECK(bitwise_equal(loaded, params, config));

  auto bytes = encode_checkpoint(params, config);
  auto short_blob = bytes;
  short_blob.resize(short_blob.size() - 4);
  try {
    decode_checkpoint(short_blob);
    FAIL("expected a length error");
  } catch (const LengthError& e) {
    CHECK(e.expected() == 12);
    CHECK(e.actual() == 8);
  }

  auto other = config;
  other.mlp_dim = 64;
  other.dropout = 0.1;
  try {
    decode_checkpoint(bytes, other);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("mlp_dim") != std::string::npos);
    CHECK(what.find("dropout") != std::string::npos);
  }

  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
}

TEST_CASE("double and float forward agree") {
  const ModelConfig config = tiny_model_config();
  const auto params = init_params(config, 12);
  Rng rng(13);
  const auto volumes = random_tensor<double>({2, 10, 16, 16}, rng, 0, 1);
  const std::vector<float> ages{50.0f, 72.5f};
  const auto f64 = forward(volumes, ages, params.cast<double>(config), config);
  const auto f32 = forward(volumes.cast<float>(), ages, params, config);
  for (std::size_t i = 0; i < f64.numel(); ++i) {
    CHECK(std::abs(f32.data()[i] - f64.data()[i]) < 1e-4);
  }
}
