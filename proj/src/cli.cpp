#include "osvit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "osvit/dataset.hpp"
#include "osvit/evaluation.hpp"
#include "osvit/rng.hpp"
#include "osvit/runtime.hpp"
#include "osvit/serialize.hpp"
#include "osvit/training.hpp"

namespace osvit::cli {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string() +
                  (ec ? ": " + ec.message() : ""));
  }
}

// Provenance record written to <out>/manifest.json before any other output
// and rewritten with the final status.
class RunManifest {
 public:
  RunManifest(std::optional<fs::path> dir, std::string command)
      : dir_(std::move(dir)) {
    doc_["command"] = std::move(command);
    doc_["status"] = "running";
    doc_["config"] = Json::object();
    doc_["seed"] = nullptr;
    doc_["inputs"] = Json::object();
    doc_["outputs"] = Json::array();
    doc_["started_at"] = utc_now();
    doc_["finished_at"] = nullptr;
    doc_["versions"] = Json{{"osvit", kVersion},
                            {"rng", std::string(Rng::kAlgorithm)},
                            {"rvol_format", 1},
                            {"osvt_format", 1}};
  }

  Json& config() { return doc_["config"]; }
  Json& inputs() { return doc_["inputs"]; }
  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void add_output(const std::string& name) { doc_["outputs"].push_back(name); }

  void begin() {
    if (!dir_) return;
    ensure_dir(*dir_);
    flush();
  }

  void finish(int exit_code, const std::string& message = {}) {
    doc_["status"] = exit_code == kExitOk ? "ok" : "failed";
    doc_["exit_code"] = exit_code;
    if (!message.empty()) doc_["error"] = message;
    doc_["finished_at"] = utc_now();
    if (!dir_) return;
    try {
      flush();
    } catch (const Error&) {
      // The run's own error (if any) is already being reported.
    }
  }

 private:
  void flush() { write_text(*dir_ / "manifest.json", doc_.dump(2) + "\n"); }

  std::optional<fs::path> dir_;
  Json doc_;
};

template <typename Fn>
int guarded(RunManifest& manifest, std::ostream& err, Fn&& body) {
  int code = kExitOk;
  std::string message;
  try {
    manifest.begin();
    code = body();
  } catch (const Error& e) {
    code = exit_code_for(e.kind());
    message = e.what();
  } catch (const fs::filesystem_error& e) {
    code = kExitIo;
    message = e.what();
  } catch (const nlohmann::json::exception& e) {
    code = kExitIo;
    message = e.what();
  }
  if (!message.empty()) err << "error: " << message << "\n";
  manifest.finish(code, message);
  return code;
}

unsigned worker_threads(bool deterministic) {
  if (deterministic) return 1;
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OSVIT_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

void configure_threads(bool deterministic) {
  set_compute_threads(static_cast<int>(worker_threads(deterministic)));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// <subject_id>_<sequence>.rvol files in a directory.
std::map<std::pair<std::string, Sequence>, fs::path> index_volume_dir(
    const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw IoError("data directory not found: " + dir.string());
  }
  std::map<std::pair<std::string, Sequence>, fs::path> index;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path& p = entry.path();
    if (lower(p.extension().string()) != ".rvol") continue;
    const std::string stem = p.stem().string();
    const auto cut = stem.rfind('_');
    if (cut == std::string::npos || cut == 0) continue;
    const auto seq = parse_sequence(stem.substr(cut + 1));
    if (!seq) continue;
    index[{stem.substr(0, cut), *seq}] = p;
  }
  return index;
}

VolumeLookup directory_lookup(const fs::path& dir) {
  auto index = index_volume_dir(dir);
  return [index = std::move(index)](const std::string& id, Sequence seq)
             -> std::shared_ptr<const Volume> {
    auto it = index.find({id, seq});
    if (it == index.end()) return nullptr;
    return std::make_shared<const Volume>(read_rvol(it->second));
  };
}

std::vector<Sample> load_cohort_samples(const fs::path& data,
                                        const fs::path& csv,
                                        const ModelConfig& model) {
  const auto records = read_metadata_csv(csv);
  const auto cohort = filter_cohort(records);
  if (cohort.size() < 2) {
    throw ConfigError("cohort has " + std::to_string(cohort.size()) +
                      " labeled GTR subjects; at least 2 are required");
  }
  return build_samples(cohort, directory_lookup(data), model.input_dims);
}

Json train_config_json(const TrainConfig& c, const std::string& lr_arg) {
  return Json{{"learning_rate", c.learning_rate},
              {"learning_rate_arg", lr_arg},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"early_stop_patience", c.early_stop_patience},
              {"early_stop_min_delta", c.early_stop_min_delta},
              {"val_fraction", c.val_fraction},
              {"seed", c.seed},
              {"deterministic", c.deterministic},
              {"ignore_index", c.ignore_index},
              {"adam", Json{{"beta1", c.beta1},
                            {"beta2", c.beta2},
                            {"epsilon", c.epsilon}}}};
}

double parse_positive(const std::string& text, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !(v > 0.0) || !std::isfinite(v)) {
    throw ConfigError(std::string(what) + " must be a positive number, got '" +
                      text + "'");
  }
  return v;
}

Json report_pair(const std::vector<Sample>& samples, const Prediction& pred,
                 const std::string& partition, std::string* text) {
  std::vector<std::int64_t> truth;
  for (const auto& s : samples) truth.push_back(static_cast<std::int64_t>(s.label));
  const ConfusionMatrix cm = confusion(truth, pred.classes);
  const MetricsReport report = metrics(cm, partition);
  if (text) *text += render_text(report, cm);
  return render_json(report, cm);
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension:
    case ErrorKind::kConfig:
    case ErrorKind::kUsage:
    case ErrorKind::kParse:
      return kExitValidation;
    case ErrorKind::kFormat:
    case ErrorKind::kLength:
    case ErrorKind::kUnsupported:
    case ErrorKind::kIo:
      return kExitIo;
    case ErrorKind::kNumeric:
      return kExitNumeric;
  }
  return kExitValidation;
}

int cmd_synth(const SynthOptions& options, std::ostream& out,
              std::ostream& err) {
  RunManifest manifest(options.out, "synth");
  const SynthConfig synth_config;
  manifest.config() = Json{{"subjects", options.subjects},
                           {"generator", synth_config}};
  manifest.set_seed(options.seed);
  return guarded(manifest, err, [&] {
    const SynthCohort cohort = synth_generate(options.subjects, options.seed,
                                              synth_config);
    std::size_t written = 0;
    for (const auto& s : cohort.subjects) {
      for (std::size_t i = 0; i < kAllSequences.size(); ++i) {
        const std::string name = s.record.subject_id + "_" +
                                 std::string(to_string(kAllSequences[i])) +
                                 ".rvol";
        write_rvol(*s.volumes[i], options.out / name);
        manifest.add_output(name);
        ++written;
      }
    }
    const auto records = cohort.records();
    write_metadata_csv(records, options.out / "metadata.csv");
    manifest.add_output("metadata.csv");
    out << "wrote " << written << " volumes and metadata.csv for "
        << records.size() << " subjects to " << options.out.string() << "\n";
    return kExitOk;
  });
}

int cmd_preprocess(const PreprocessOptions& options, std::ostream& out,
                   std::ostream& err) {
  RunManifest manifest(options.out, "preprocess");
  manifest.config() = Json{{"preprocess", options.config},
                           {"deterministic", options.deterministic}};
  manifest.inputs()["in"] = options.in.string();
  return guarded(manifest, err, [&] {
    options.config.validate();
    if (!fs::is_directory(options.in)) {
      throw IoError("input directory not found: " + options.in.string());
    }
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(options.in)) {
      if (!entry.is_regular_file()) continue;
      const std::string name = lower(entry.path().filename().string());
      if (name.ends_with(".rvol") || name.ends_with(".nii")) {
        inputs.push_back(entry.path());
      }
    }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) {
      throw ConfigError("no volumes found in " + options.in.string());
    }
    if (fs::equivalent(options.in, options.out)) {
      throw ConfigError("--out must differ from --in");
    }

    std::vector<std::string> outcome(inputs.size());
    std::vector<int> codes(inputs.size(), kExitOk);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < inputs.size(); i = next++) {
        const fs::path& src = inputs[i];
        std::string stem = src.filename().string();
        stem = stem.substr(0, stem.find('.'));
        const fs::path dst = options.out / (stem + ".rvol");
        try {
          const Volume v = read_volume(src);
          write_rvol(preprocess_volume(v, options.config), dst);
          outcome[i] = dst.filename().string();
        } catch (const Error& e) {
          codes[i] = exit_code_for(e.kind());
          outcome[i] = e.what();
        }
      }
    };
    const unsigned n_workers = std::min<unsigned>(
        worker_threads(options.deterministic),
        static_cast<unsigned>(inputs.size()));
    {
      std::vector<std::jthread> pool;
      for (unsigned t = 1; t < n_workers; ++t) pool.emplace_back(worker);
      worker();
    }

    int exit_code = kExitOk;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (codes[i] == kExitOk) {
        manifest.add_output(outcome[i]);
        ++ok;
      } else {
        err << "error: " << inputs[i].filename().string() << ": " << outcome[i]
            << "\n";
        if (exit_code == kExitOk) exit_code = codes[i];
      }
    }
    out << "preprocessed " << ok << " of " << inputs.size() << " volumes to "
        << options.config.target_dims.to_string() << "\n";
    return exit_code;
  });
}

int cmd_train(const TrainOptions& options, std::ostream& out,
              std::ostream& err) {
  RunManifest manifest(options.out, "train");
  TrainConfig tc;
  tc.batch_size = options.batch_size;
  tc.seed = options.seed;
  tc.max_epochs = options.max_epochs;
  tc.early_stop_patience = options.patience;
  tc.early_stop_min_delta = options.min_delta;
  tc.val_fraction = options.val_fraction;
  tc.deterministic = options.deterministic;
  manifest.set_seed(options.seed);
  manifest.inputs() = Json{{"data", options.data.string()},
                           {"csv", options.csv.string()}};

  return guarded(manifest, err, [&] {
    tc.learning_rate = parse_positive(options.learning_rate_arg, "--lr");
    manifest.config() = Json{{"train", train_config_json(tc, options.learning_rate_arg)},
                             {"train_fraction", options.train_fraction},
                             {"model", options.model}};
    manifest.begin();
    tc.validate();
    options.model.validate();
    configure_threads(options.deterministic);
    err << "learning rate: " << options.learning_rate_arg << "\n";

    const auto samples = load_cohort_samples(options.data, options.csv,
                                             options.model);
    const DatasetSplit split =
        split_by_subject(samples, options.train_fraction, options.seed);
    write_split_manifest(split, options.out / "split.txt");
    manifest.add_output("split.txt");
    if (split.train.empty()) {
      throw ConfigError("training partition is empty; increase the cohort or "
                        "the train fraction");
    }

    const ModelParams init = init_params(options.model, options.seed);
    TrainResult result = train(
        options.model, init, split.train, tc,
        [&](const EpochRecord& e, const ModelParams&) {
          err << "epoch " << e.epoch << " train_loss " << e.train_loss
              << " train_acc " << e.train_accuracy;
          if (e.val_loss) err << " val_loss " << *e.val_loss;
          err << "\n";
          return true;
        });

    write_text(options.out / "train_log.jsonl", result.log.to_jsonl());
    manifest.add_output("train_log.jsonl");
    save_checkpoint(result.best_params, options.model, options.out / "best.osvt");
    manifest.add_output("best.osvt");
    save_checkpoint(result.last_params, options.model, options.out / "last.osvt");
    manifest.add_output("last.osvt");
    if (result.log.divergence) {
      throw NumericError("training diverged at " + *result.log.divergence +
                         "; best checkpoint retained");
    }

    Json metrics_doc = Json::object();
    std::string text;
    metrics_doc["train"] = report_pair(
        split.train,
        predict(result.best_params, options.model, split.train, tc.batch_size),
        "train", &text);
    if (!split.test.empty()) {
      text += "\n";
      metrics_doc["test"] = report_pair(
          split.test,
          predict(result.best_params, options.model, split.test, tc.batch_size),
          "test", &text);
    }
    metrics_doc["best_epoch"] = result.log.best_epoch;
    write_text(options.out / "metrics.json", metrics_doc.dump(2) + "\n");
    manifest.add_output("metrics.json");
    write_text(options.out / "metrics.txt", text);
    manifest.add_output("metrics.txt");
    out << text;
    return kExitOk;
  });
}

int cmd_eval(const EvalOptions& options, std::ostream& out,
             std::ostream& err) {
  RunManifest manifest(options.out, "eval");
  manifest.inputs() = Json{{"model", options.model.string()},
                           {"data", options.data.string()},
                           {"csv", options.csv.string()},
                           {"split", options.split ? Json(options.split->string())
                                                   : Json(nullptr)}};
  manifest.config() = Json{{"all", options.all},
                           {"partition", options.partition},
                           {"format", options.format}};
  return guarded(manifest, err, [&] {
    if (!options.split && !options.all) {
      throw UsageError("eval needs --split FILE or --all");
    }
    if (options.format != "text" && options.format != "json") {
      throw UsageError("--format must be text or json");
    }
    if (options.partition != "train" && options.partition != "test") {
      throw UsageError("--partition must be train or test");
    }
    configure_threads(false);
    auto [params, config] = load_checkpoint(options.model);
    auto samples = load_cohort_samples(options.data, options.csv, config);
    std::string partition = "all";
    if (options.split) {
      const auto part_of = read_split_manifest(*options.split);
      std::vector<Sample> selected;
      for (auto& s : samples) {
        auto it = part_of.find(s.subject_id);
        if (it != part_of.end() && it->second == options.partition) {
          selected.push_back(std::move(s));
        }
      }
      samples = std::move(selected);
      partition = options.partition;
    }
    if (samples.empty()) {
      throw ConfigError("no samples selected for partition " + partition);
    }
    std::string text;
    const Json doc =
        report_pair(samples, predict(params, config, samples), partition, &text);
    const std::string rendered =
        options.format == "json" ? doc.dump(2) + "\n" : text;
    out << rendered;
    if (options.out) {
      const std::string name =
          options.format == "json" ? "report.json" : "report.txt";
      write_text(*options.out / name, rendered);
      manifest.add_output(name);
    }
    return kExitOk;
  });
}

int cmd_predict(const PredictOptions& options, std::ostream& out,
                std::ostream& err) {
  RunManifest manifest(options.out, "predict");
  manifest.inputs() = Json{{"model", options.model.string()},
                           {"volume", options.volume.string()}};
  manifest.config() = Json{{"age", options.age}};
  return guarded(manifest, err, [&] {
    if (!(options.age > 0.0) || !std::isfinite(options.age)) {
      throw ConfigError("--age must be positive, got " +
                        std::to_string(options.age));
    }
    auto [params, config] = load_checkpoint(options.model);
    const Volume volume = read_volume(options.volume);
    if (volume.dims() != config.input_dims || volume.type() != VoxelType::kU8) {
      throw DimensionError("volume is " + volume.dims().to_string() +
                           ", model expects a u8 " +
                           config.input_dims.to_string() +
                           " volume; run `osvit preprocess` first");
    }
    const Volume* vols[] = {&volume};
    const float ages[] = {static_cast<float>(options.age)};
    const Tensor logits =
        forward(volumes_to_tensor<float>(vols, config), ages, params, config);
    auto [cls, probs] = classify_logits(logits.data());
    char line[160];
    std::snprintf(line, sizeof(line),
                  "class %lld %s probabilities %.6f %.6f %.6f\n",
                  static_cast<long long>(cls),
                  std::string(class_name(static_cast<SurvivalClass>(cls))).c_str(),
                  probs[0], probs[1], probs[2]);
    out << line;
    if (options.out) {
      write_text(*options.out / "prediction.txt", line);
      manifest.add_output("prediction.txt");
    }
    return kExitOk;
  });
}

int run(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Volumetric ViT survival-class engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic phantom cohort");
  synth_cmd->add_option("--subjects", synth.subjects, "Number of subjects (>= 3)")
      ->required();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  PreprocessOptions prep;
  std::string target = prep.config.target_dims.to_string();
  auto* prep_cmd = app.add_subcommand("preprocess", "Downsample and quantize volumes");
  prep_cmd->add_option("--in", prep.in, "Directory of .rvol/.nii volumes")->required();
  prep_cmd->add_option("--out", prep.out, "Output directory")->required();
  prep_cmd->add_option("--target", target, "Target dims DxHxW")->capture_default_str();
  prep_cmd->add_option("--order", prep.config.spline_order, "Spline order (1 or 3)")
      ->capture_default_str();
  prep_cmd->add_flag("--deterministic", prep.deterministic, "Single worker");

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a preprocessed cohort");
  train_cmd->add_option("--data", tr.data, "Directory of <subject>_<SEQ>.rvol")
      ->required();
  train_cmd->add_option("--csv", tr.csv, "Metadata CSV")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--lr", tr.learning_rate_arg, "Adam learning rate")
      ->capture_default_str();
  train_cmd->add_option("--batch", tr.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Run seed")->capture_default_str();
  train_cmd->add_option("--max-epochs", tr.max_epochs, "Epoch cap")
      ->capture_default_str();
  train_cmd->add_option("--patience", tr.patience, "Early-stopping patience")
      ->capture_default_str();
  train_cmd->add_option("--min-delta", tr.min_delta, "Early-stopping min delta")
      ->capture_default_str();
  train_cmd->add_option("--val-fraction", tr.val_fraction,
                        "Train subjects held out for early stopping")
      ->capture_default_str();
  train_cmd->add_option("--train-fraction", tr.train_fraction,
                        "Subject fraction in the training partition")
      ->capture_default_str();
  train_cmd->add_option("--dropout", tr.model.dropout, "Dropout rate")
      ->capture_default_str();
  train_cmd->add_flag("--deterministic", tr.deterministic,
                      "Single-threaded, bitwise-reproducible run");

  EvalOptions ev;
  std::string eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--model", ev.model, "OSVT checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Directory of <subject>_<SEQ>.rvol")
      ->required();
  eval_cmd->add_option("--csv", ev.csv, "Metadata CSV")->required();
  std::string split_path;
  auto* split_opt = eval_cmd->add_option("--split", split_path, "Split manifest");
  auto* all_opt = eval_cmd->add_flag("--all", ev.all, "Evaluate the whole cohort");
  split_opt->excludes(all_opt);
  eval_cmd->add_option("--partition", ev.partition, "train or test")
      ->capture_default_str();
  eval_cmd->add_option("--format", ev.format, "text or json")->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Directory for report and manifest");

  PredictOptions pr;
  std::string predict_out;
  auto* predict_cmd = app.add_subcommand("predict", "Classify one volume");
  predict_cmd->add_option("--model", pr.model, "OSVT checkpoint")->required();
  predict_cmd->add_option("--volume", pr.volume, "Preprocessed volume")->required();
  predict_cmd->add_option("--age", pr.age, "Age in years")->required();
  predict_cmd->add_option("--out", predict_out, "Directory for prediction and manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  if (synth_cmd->parsed()) return cmd_synth(synth, std::cout, std::cerr);
  if (prep_cmd->parsed()) {
    try {
      prep.config.target_dims = parse_dims(target);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitValidation;
    }
    return cmd_preprocess(prep, std::cout, std::cerr);
  }
  if (train_cmd->parsed()) return cmd_train(tr, std::cout, std::cerr);
  if (eval_cmd->parsed()) {
    if (!split_path.empty()) ev.split = split_path;
    if (!eval_out.empty()) ev.out = eval_out;
    return cmd_eval(ev, std::cout, std::cerr);
  }
  if (predict_cmd->parsed()) {
    if (!predict_out.empty()) pr.out = predict_out;
    return cmd_predict(pr, std::cout, std::cerr);
  }
  return kExitValidation;
}

}  // namespace osvit::cli
