#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "osvit/error.hpp"
#include "osvit/model.hpp"
#include "osvit/preprocess.hpp"

// Batch command surface. Each cmd_* function is what the matching `osvit`
// subcommand runs; they return the process exit code:
//   0 success, 1 validation/config, 2 IO/format, 3 numeric divergence.
namespace osvit::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumeric = 3;

int exit_code_for(ErrorKind kind);

struct SynthOptions {
  std::size_t subjects = 12;
  std::uint64_t seed = 0;
  fs::path out;
};

struct PreprocessOptions {
  fs::path in;
  fs::path out;
  PreprocessConfig config;
  bool deterministic = false;
};

struct TrainOptions {
  fs::path data;
  fs::path csv;
  fs::path out;
  // Verbatim --lr argument; parsed into learning_rate.
  std::string learning_rate_arg = "1e-4";
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double min_delta = 1e-4;
  double val_fraction = 0.1;
  double train_fraction = 0.8;
  bool deterministic = false;
  ModelConfig model;
};

struct EvalOptions {
  fs::path model;
  fs::path data;
  fs::path csv;
  std::optional<fs::path> split;
  bool all = false;
  std::string partition = "test";
  std::string format = "text";
  std::optional<fs::path> out;
};

struct PredictOptions {
  fs::path model;
  fs::path volume;
  double age = 0.0;
  std::optional<fs::path> out;
};

int cmd_synth(const SynthOptions& options, std::ostream& out, std::ostream& err);
int cmd_preprocess(const PreprocessOptions& options, std::ostream& out,
                   std::ostream& err);
int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);
int cmd_predict(const PredictOptions& options, std::ostream& out,
                std::ostream& err);

// Parses argv and dispatches to a subcommand.
int run(int argc, char** argv);

}  // namespace osvit::cli
