#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "osvit/dataset.hpp"
#include "osvit/serialize.hpp"

namespace osvit {

// counts[true][predicted], class codes as in SurvivalClass.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t c) const;
  std::uint64_t col_sum(std::size_t c) const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion(std::span<const std::int64_t> truth,
                          std::span<const std::int64_t> predicted);

struct MetricsReport {
  std::string partition;
  std::uint64_t samples = 0;
  double accuracy = 0.0;
  std::array<double, kNumClasses> precision{};
  std::array<double, kNumClasses> recall{};
  std::array<double, kNumClasses> f1{};
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

// Per-class precision/recall/F1 with 0/0 := 0; macro values are arithmetic
// means over the three classes.
MetricsReport metrics(const ConfusionMatrix& cm, std::string partition = "");

std::string render_text(const MetricsReport& report, const ConfusionMatrix& cm);

// {"partition", "samples", "accuracy", "confusion_matrix" (rows = true),
//  "per_class": [{"code","name","precision","recall","f1"} x3],
//  "macro": {"precision","recall","f1"}}
Json render_json(const MetricsReport& report, const ConfusionMatrix& cm);

}  // namespace osvit
