#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "osvit/dataset.hpp"
#include "osvit/model.hpp"
#include "osvit/ops.hpp"

namespace osvit {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 10;
  double early_stop_min_delta = 1e-4;
  // Fraction of training subjects held out to monitor early stopping.
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::int64_t ignore_index = ops::kDefaultIgnoreIndex;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(std::span<const NamedTensor<float>> params,
                              double beta1 = 0.9, double beta2 = 0.999,
                              double epsilon = 1e-8);
};

// One bias-corrected Adam update using each parameter's accumulated
// gradient (a parameter without a gradient buffer counts as zero gradient).
void adam_step(std::span<NamedTensor<float>> params, AdamState& state,
               double learning_rate);

void zero_grads(std::span<NamedTensor<float>> params);

// Stops once the monitored loss has failed to improve on the best value by
// more than min_delta for `patience` consecutive epochs.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}

  // Feeds the loss of `epoch` (1-based). Returns true when training should
  // stop after this epoch.
  bool update(std::size_t epoch, double loss);

  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::size_t best_epoch_ = 0;
  double best_loss_ = 0.0;
  std::size_t stale_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_loss;
  double elapsed_ms = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::optional<std::size_t> early_stop_epoch;
  std::optional<std::string> divergence;

  // One JSON object per line: epoch, train_loss, train_acc, val_loss,
  // elapsed_ms.
  std::string to_jsonl() const;
};

struct TrainResult {
  ModelParams best_params;
  ModelParams last_params;
  TrainLog log;
  std::vector<std::string> validation_subjects;
};

// Called after every epoch with the current parameters; return false to end
// training early.
using EpochCallback =
    std::function<bool(const EpochRecord&, const ModelParams& current)>;

TrainResult train(const ModelConfig& model_config, const ModelParams& initial,
                  std::span<const Sample> train_samples,
                  const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct Prediction {
  std::vector<std::int64_t> classes;
  std::vector<std::array<double, kNumClasses>> probabilities;
};

// argmax of softmax(logits); ties resolve to the lowest class code.
std::pair<std::int64_t, std::array<double, kNumClasses>> classify_logits(
    std::span<const float> logits);

Prediction predict(const ModelParams& params, const ModelConfig& config,
                   std::span<const Sample> samples, std::size_t batch_size = 16);

// Mean cross-entropy and accuracy of `params` over `samples`.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate_loss(const ModelParams& params, const ModelConfig& config,
                         std::span<const Sample> samples,
                         std::size_t batch_size = 16);

}  // namespace osvit
