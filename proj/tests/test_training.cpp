#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "osvit/dataset.hpp"
#include "osvit/error.hpp"
#include "osvit/training.hpp"
#include "support.hpp"

using namespace osvit;
using osvit::testing::tiny_model_config;

namespace {

std::vector<Sample> tiny_samples(std::size_t subjects, std::uint64_t seed) {
  SynthConfig sc;
  sc.dims = tiny_model_config().input_dims;
  const auto cohort = synth_generate(subjects, seed, sc);
  return build_samples(cohort.records(), cohort.lookup());
}

std::vector<NamedTensor<float>> single_param(std::vector<float> values) {
  const std::size_t n = values.size();
  Tensor t({n}, std::move(values));
  t.set_requires_grad();
  return {NamedTensor<float>{"w", t}};
}

}  // namespace

TEST_CASE("adam leaves parameters alone without gradient") {
  auto params = single_param({1.0f, -2.0f, 3.0f});
  auto state = AdamState::for_params(params);
  for (int i = 0; i < 5; ++i) {
    zero_grads(params);
    auto g = params[0].tensor.mutable_grad();
    for (auto& x : g) x = 0.0f;
    adam_step(params, state, 1e-3);
  }
  CHECK(params[0].tensor.data()[0] == 1.0f);
  CHECK(params[0].tensor.data()[1] == -2.0f);
  CHECK(params[0].tensor.data()[2] == 3.0f);
}

TEST_CASE("adam first step moves by the learning rate against the gradient") {
  const std::vector<float> start{0.5f, 0.5f, 0.5f, 0.5f};
  const std::vector<float> grad{3.0f, -0.01f, 200.0f, -7.0f};
  auto params = single_param(start);
  auto state = AdamState::for_params(params);
  auto g = params[0].tensor.mutable_grad();
  std::copy(grad.begin(), grad.end(), g.begin());
  const double lr = 1e-3;
  adam_step(params, state, lr);
  for (std::size_t i = 0; i < start.size(); ++i) {
    const double delta = params[0].tensor.data()[i] - start[i];
    CHECK(delta * grad[i] < 0);
    CHECK(std::abs(delta) <= lr * (1 + 1e-4));
    CHECK(std::abs(delta) >= lr * (1 - 1e-3));
  }
  CHECK(state.step == 1);

  g = params[0].tensor.mutable_grad();
  g[0] = NAN;
  CHECK_THROWS_AS(adam_step(params, state, lr), NumericError);
}

TEST_CASE("early stopping walk-through") {
  EarlyStopping stop(3, 1e-4);
  const std::vector<double> losses{1.0, 0.9, 0.91, 0.92, 0.93};
  std::size_t stopped_at = 0;
  for (std::size_t e = 1; e <= losses.size(); ++e) {
    if (stop.update(e, losses[e - 1])) {
      stopped_at = e;
      break;
    }
  }
  CHECK(stopped_at == 5);
  CHECK(stop.best_epoch() == 2);
  CHECK(stop.best_loss() == 0.9);

  EarlyStopping tiny_gain(2, 0.1);
  CHECK_FALSE(tiny_gain.update(1, 1.0));
  CHECK_FALSE(tiny_gain.update(2, 0.95));
  CHECK(tiny_gain.update(3, 0.92));
  CHECK(tiny_gain.best_epoch() == 1);
}

TEST_CASE("classify logits") {
  const std::vector<float> a{2.0f, 1.0f, 0.0f};
  const auto [cls, probs] = classify_logits(a);
  CHECK(cls == 0);
  CHECK(probs[0] == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(probs[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(probs[2] == doctest::Approx(0.0900).epsilon(1e-3));

  const std::vector<float> tie{0.0f, 0.0f, 0.0f};
  CHECK(classify_logits(tie).first == 0);

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const std::vector<float> z{static_cast<float>(rng.uniform(-30, 30)),
                               static_cast<float>(rng.uniform(-30, 30)),
                               static_cast<float>(rng.uniform(-30, 30))};
    const auto p = classify_logits(z).second;
    CHECK(std::abs(p[0] + p[1] + p[2] - 1.0) < 1e-6);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.val_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.early_stop_patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("deterministic training reproduces bitwise") {
  const ModelConfig config = tiny_model_config();
  const auto samples = tiny_samples(6, 21);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 5;
  tc.max_epochs = 4;
  tc.val_fraction = 0.2;
  tc.seed = 8;
  tc.deterministic = true;

  const auto a = train(config, init_params(config, 1), samples, tc);
  const auto b = train(config, init_params(config, 1), samples, tc);
  REQUIRE(a.log.epochs.size() == b.log.epochs.size());
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
    CHECK(a.log.epochs[i].train_loss == b.log.epochs[i].train_loss);
    CHECK(a.log.epochs[i].val_loss == b.log.epochs[i].val_loss);
  }
  CHECK(a.log.best_epoch == b.log.best_epoch);
  CHECK(a.validation_subjects == b.validation_subjects);
  CHECK(encode_checkpoint(a.best_params, config) ==
        encode_checkpoint(b.best_params, config));
  CHECK(a.validation_subjects.size() == 1);
}

TEST_CASE("training reduces the loss on a small set") {
  const ModelConfig config = tiny_model_config();
  const auto samples = tiny_samples(6, 2);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 8;
  tc.max_epochs = 30;
  tc.early_stop_patience = 30;
  tc.val_fraction = 0.0;
  tc.deterministic = true;
  const auto initial = init_params(config, 2);
  const double before = evaluate_loss(initial, config, samples).loss;
  const auto result = train(config, initial, samples, tc);
  const double after = evaluate_loss(result.last_params, config, samples).loss;
  CHECK(after < before);
  CHECK(result.log.epochs.size() == 30);

  const auto jsonl = result.log.to_jsonl();
  std::size_t lines = 0;
  for (char c : jsonl) lines += c == '\n';
  CHECK(lines == 30);
  CHECK(jsonl.find("\"train_loss\"") != std::string::npos);
}

TEST_CASE("epoch callback can end training") {
  const ModelConfig config = tiny_model_config();
  const auto samples = tiny_samples(3, 4);
  TrainConfig tc;
  tc.max_epochs = 10;
  tc.val_fraction = 0.0;
  std::size_t calls = 0;
  const auto result = train(config, init_params(config, 3), samples, tc,
                            [&](const EpochRecord& e, const ModelParams&) {
                              ++calls;
                              return e.epoch < 2;
                            });
  CHECK(calls == 2);
  CHECK(result.log.epochs.size() == 2);
}

TEST_CASE("prediction covers every sample") {
  const ModelConfig config = tiny_model_config();
  const auto samples = tiny_samples(3, 5);
  const auto pred = predict(init_params(config, 4), config, samples, 5);
  CHECK(pred.classes.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(pred.classes[i] >= 0);
    CHECK(pred.classes[i] <= 2);
    const auto& p = pred.probabilities[i];
    CHECK(std::abs(p[0] + p[1] + p[2] - 1.0) < 1e-6);
  }
}

TEST_CASE("adam steps descend a convex quadratic") {
  auto params = single_param({2.0f});
  auto state = AdamState::for_params(params);
  double previous = 0.5 * 3.0 * 2.0 * 2.0;
  for (int step = 0; step < 20; ++step) {
    const float x = params[0].tensor.data()[0];
    zero_grads(params);
    params[0].tensor.mutable_grad()[0] = 3.0f * x;
    adam_step(params, state, 1e-2);
    const double y = params[0].tensor.data()[0];
    const double f = 0.5 * 3.0 * y * y;
    CHECK(f < previous);
    previous = f;
  }
}
