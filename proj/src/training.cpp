#include "osvit/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "osvit/error.hpp"
#include "osvit/runtime.hpp"
#include "osvit/serialize.hpp"

namespace osvit {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in [0, 1)");
  }
  if (early_stop_patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

AdamState AdamState::for_params(std::span<const NamedTensor<float>> params,
                                double beta1, double beta2, double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0f);
    s.v.emplace_back(p.tensor.numel(), 0.0f);
  }
  return s;
}

void adam_step(std::span<NamedTensor<float>> params, AdamState& state,
               double learning_rate) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks " +
                         std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel()) {
      throw DimensionError("adam_step: state shape mismatch for " +
                           params[i].name);
    }
    if (t.has_grad() && t.grad().size() != t.numel()) {
      throw DimensionError("adam_step: gradient shape mismatch for " +
                           params[i].name);
    }
    for (float g : t.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in " +
                           params[i].name);
      }
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto data = tensor.data();
    const auto grad = tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double m_hat = mk / bc1;
      const double v_hat = vk / bc2;
      data[k] = static_cast<float>(
          data[k] - learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

void zero_grads(std::span<NamedTensor<float>> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

bool EarlyStopping::update(std::size_t epoch, double loss) {
  improved_ = best_epoch_ == 0 || loss < best_loss_ - min_delta_;
  if (improved_) {
    best_epoch_ = epoch;
    best_loss_ = loss;
    stale_ = 0;
    return false;
  }
  ++stale_;
  return stale_ >= patience_;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    Json j{{"epoch", e.epoch},
           {"train_loss", e.train_loss},
           {"train_acc", e.train_accuracy},
           {"val_loss", e.val_loss ? Json(*e.val_loss) : Json(nullptr)},
           {"elapsed_ms", e.elapsed_ms}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

std::vector<const Volume*> batch_volumes(std::span<const Sample> samples,
                                         std::span<const std::size_t> idx) {
  std::vector<const Volume*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(samples[i].volume.get());
  return out;
}

std::vector<float> batch_ages(std::span<const Sample> samples,
                              std::span<const std::size_t> idx) {
  std::vector<float> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(samples[i].age);
  return out;
}

std::vector<std::int64_t> batch_targets(std::span<const Sample> samples,
                                        std::span<const std::size_t> idx) {
  std::vector<std::int64_t> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    out.push_back(static_cast<std::int64_t>(samples[i].label));
  }
  return out;
}

// Runs inference over samples in order, handing each batch's logits to fn.
template <typename Fn>
void for_each_logits_batch(const ModelParams& params, const ModelConfig& config,
                           std::span<const Sample> samples,
                           std::size_t batch_size, Fn&& fn) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    const auto vols = batch_volumes(samples, idx);
    const auto ages = batch_ages(samples, idx);
    const Tensor x = volumes_to_tensor<float>(vols, config);
    const Tensor logits = forward(x, ages, params, config);
    fn(idx, logits);
  }
}

}  // namespace

std::pair<std::int64_t, std::array<double, kNumClasses>> classify_logits(
    std::span<const float> logits) {
  if (logits.size() != kNumClasses) {
    throw DimensionError("classify_logits: expected " +
                         std::to_string(kNumClasses) + " logits, got " +
                         std::to_string(logits.size()));
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::array<double, kNumClasses> probs{};
  double total = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    probs[c] = std::exp(static_cast<double>(logits[c]) - peak);
    total += probs[c];
  }
  std::size_t best = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    probs[c] /= total;
    if (probs[c] > probs[best]) best = c;
  }
  return {static_cast<std::int64_t>(best), probs};
}

Prediction predict(const ModelParams& params, const ModelConfig& config,
                   std::span<const Sample> samples, std::size_t batch_size) {
  if (config.num_classes != kNumClasses) {
    throw ConfigError("predict: survival head must have 3 classes");
  }
  Prediction out;
  out.classes.resize(samples.size());
  out.probabilities.resize(samples.size());
  for_each_logits_batch(
      params, config, samples, std::max<std::size_t>(1, batch_size),
      [&](std::span<const std::size_t> idx, const Tensor& logits) {
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto [cls, probs] = classify_logits(
              logits.data().subspan(r * kNumClasses, kNumClasses));
          out.classes[idx[r]] = cls;
          out.probabilities[idx[r]] = probs;
        }
      });
  return out;
}

Evaluation evaluate_loss(const ModelParams& params, const ModelConfig& config,
                         std::span<const Sample> samples,
                         std::size_t batch_size) {
  if (samples.empty()) throw ConfigError("evaluate_loss: no samples");
  double total_loss = 0.0;
  std::size_t correct = 0;
  for_each_logits_batch(
      params, config, samples, std::max<std::size_t>(1, batch_size),
      [&](std::span<const std::size_t> idx, const Tensor& logits) {
        const auto targets = batch_targets(samples, idx);
        total_loss += static_cast<double>(
                          ops::cross_entropy(logits, targets).item()) *
                      static_cast<double>(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto [cls, probs] = classify_logits(
              logits.data().subspan(r * config.num_classes, config.num_classes));
          if (cls == targets[r]) ++correct;
        }
      });
  return Evaluation{total_loss / static_cast<double>(samples.size()),
                    static_cast<double>(correct) /
                        static_cast<double>(samples.size())};
}

TrainResult train(const ModelConfig& model_config, const ModelParams& initial,
                  std::span<const Sample> train_samples,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  model_config.validate();
  if (train_samples.empty()) throw ConfigError("train: empty training set");
  if (config.deterministic) set_compute_threads(1);

  Rng rng(config.seed);

  // Subject-level validation carve-out.
  std::vector<Sample> fit_set;
  std::vector<Sample> val_set;
  std::vector<std::string> val_subjects;
  {
    std::vector<std::string> ids =
        subject_ids(std::span<const Sample>(train_samples));
    const auto n_val = static_cast<std::size_t>(
        std::floor(config.val_fraction * static_cast<double>(ids.size())));
    if (n_val >= 1 && n_val < ids.size()) {
      rng.shuffle(std::span<std::string>(ids));
      val_subjects.assign(ids.begin(),
                          ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    }
    const std::set<std::string> held(val_subjects.begin(), val_subjects.end());
    for (const auto& s : train_samples) {
      (held.contains(s.subject_id) ? val_set : fit_set).push_back(s);
    }
  }

  TrainResult result;
  result.validation_subjects = val_subjects;
  ModelParams params = initial.clone(model_config);
  auto named = params.named(model_config);
  for (auto& p : named) p.tensor.set_requires_grad(true);
  AdamState adam = AdamState::for_params(named, config.beta1, config.beta2,
                                         config.epsilon);
  EarlyStopping stopper(config.early_stop_patience, config.early_stop_min_delta);
  result.best_params = params.clone(model_config);

  std::vector<std::size_t> order(fit_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto started = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t counted = 0;
    EpochRecord record;
    record.epoch = epoch;
    try {
      for (std::size_t start = 0; start < order.size();
           start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        const auto vols = batch_volumes(fit_set, idx);
        const auto ages = batch_ages(fit_set, idx);
        const auto targets = batch_targets(fit_set, idx);

        zero_grads(named);
        Tape tape;
        ActiveTape<float> scope(tape);
        const Tensor x = volumes_to_tensor<float>(vols, model_config);
        const Tensor logits = forward(x, ages, params, model_config, nullptr, &rng);
        const Tensor loss =
            ops::cross_entropy(logits, targets, config.ignore_index);
        tape.backward(loss);
        adam_step(named, adam, config.learning_rate);

        loss_sum += static_cast<double>(loss.item()) *
                    static_cast<double>(idx.size());
        counted += idx.size();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto [cls, probs] = classify_logits(logits.data().subspan(
              r * model_config.num_classes, model_config.num_classes));
          if (cls == targets[r]) ++correct;
        }
      }
      record.train_loss = loss_sum / static_cast<double>(counted);
      record.train_accuracy =
          static_cast<double>(correct) / static_cast<double>(counted);
      if (!val_set.empty()) {
        record.val_loss =
            evaluate_loss(params, model_config, val_set, config.batch_size).loss;
      }
    } catch (const NumericError& e) {
      result.log.divergence =
          "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    record.elapsed_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - started)
                            .count();
    result.log.epochs.push_back(record);

    const double monitored = record.val_loss.value_or(record.train_loss);
    const bool stop = stopper.update(epoch, monitored);
    if (stopper.improved()) {
      result.best_params = params.clone(model_config);
      result.log.best_epoch = epoch;
    }
    if (stop) {
      result.log.early_stop_epoch = epoch;
      break;
    }
    if (on_epoch && !on_epoch(record, params)) break;
  }

  zero_grads(named);
  for (auto& p : named) p.tensor.set_requires_grad(false);
  result.last_params = std::move(params);
  return result;
}

}  // namespace osvit
