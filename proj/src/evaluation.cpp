#include "osvit/evaluation.hpp"

#include <cstdio>

#include "osvit/error.hpp"

namespace osvit {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts)
    for (auto v : row) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t n = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) n += counts[c][c];
  return n;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::uint64_t n = 0;
  for (auto v : counts[c]) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::uint64_t n = 0;
  for (const auto& row : counts) n += row[c];
  return n;
}

ConfusionMatrix confusion(std::span<const std::int64_t> truth,
                          std::span<const std::int64_t> predicted) {
  if (truth.size() != predicted.size()) {
    throw DimensionError("confusion: " + std::to_string(truth.size()) +
                         " labels vs " + std::to_string(predicted.size()) +
                         " predictions");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::int64_t code : {truth[i], predicted[i]}) {
      if (code < 0 || code >= static_cast<std::int64_t>(kNumClasses)) {
        throw UsageError("confusion: class code " + std::to_string(code) +
                         " outside {0, 1, 2}");
      }
    }
    ++cm.counts[static_cast<std::size_t>(truth[i])]
               [static_cast<std::size_t>(predicted[i])];
  }
  return cm;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics(const ConfusionMatrix& cm, std::string partition) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw UsageError("metrics: confusion matrix is empty");
  MetricsReport r;
  r.partition = std::move(partition);
  r.samples = total;
  r.accuracy = ratio(cm.trace(), total);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    r.precision[c] = ratio(cm.counts[c][c], cm.col_sum(c));
    r.recall[c] = ratio(cm.counts[c][c], cm.row_sum(c));
    const double s = r.precision[c] + r.recall[c];
    r.f1[c] = s == 0.0 ? 0.0 : 2.0 * r.precision[c] * r.recall[c] / s;
  }
  auto mean = [](const std::array<double, kNumClasses>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(kNumClasses);
  };
  r.macro_precision = mean(r.precision);
  r.macro_recall = mean(r.recall);
  r.macro_f1 = mean(r.f1);
  return r;
}

std::string render_text(const MetricsReport& report, const ConfusionMatrix& cm) {
  std::string out;
  char line[160];
  auto emit = [&](const char* fmt, auto... args) {
    std::snprintf(line, sizeof(line), fmt, args...);
    out += line;
  };
  if (!report.partition.empty()) emit("partition: %s\n", report.partition.c_str());
  emit("samples: %llu\n", static_cast<unsigned long long>(report.samples));
  emit("accuracy: %.1f%%\n", report.accuracy * 100.0);
  out += "\nconfusion matrix (rows = true, columns = predicted)\n";
  out += "legend: 0 = long-term, 1 = medium-term, 2 = short-term survival\n";
  emit("%8s %8s %8s %8s\n", "", "pred 0", "pred 1", "pred 2");
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    emit("%8s %8llu %8llu %8llu\n", ("true " + std::to_string(t)).c_str(),
         static_cast<unsigned long long>(cm.counts[t][0]),
         static_cast<unsigned long long>(cm.counts[t][1]),
         static_cast<unsigned long long>(cm.counts[t][2]));
  }
  out += "\n";
  emit("%-10s %10s %10s %10s\n", "class", "precision", "recall", "f1");
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    emit("%-10s %9.1f%% %9.1f%% %9.1f%%\n",
         (std::to_string(c) + " " +
          std::string(class_name(static_cast<SurvivalClass>(c))))
             .c_str(),
         report.precision[c] * 100.0, report.recall[c] * 100.0,
         report.f1[c] * 100.0);
  }
  emit("%-10s %9.1f%% %9.1f%% %9.1f%%\n", "average",
       report.macro_precision * 100.0, report.macro_recall * 100.0,
       report.macro_f1 * 100.0);
  return out;
}

Json render_json(const MetricsReport& report, const ConfusionMatrix& cm) {
  Json per_class = Json::array();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    per_class.push_back(
        Json{{"code", c},
             {"name", class_name(static_cast<SurvivalClass>(c))},
             {"precision", report.precision[c]},
             {"recall", report.recall[c]},
             {"f1", report.f1[c]}});
  }
  Json matrix = Json::array();
  for (const auto& row : cm.counts) matrix.push_back(row);
  return Json{{"partition", report.partition},
              {"samples", report.samples},
              {"accuracy", report.accuracy},
              {"confusion_matrix", matrix},
              {"per_class", per_class},
              {"macro",
               Json{{"precision", report.macro_precision},
                    {"recall", report.macro_recall},
                    {"f1", report.macro_f1}}}};
}

}  // namespace osvit
