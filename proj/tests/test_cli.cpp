#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "osvit/cli.hpp"
#include "osvit/serialize.hpp"
#include "osvit/volume_io.hpp"
#include "support.hpp"

using namespace osvit;
using namespace osvit::cli;
using osvit::testing::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_CASE("synth fan-out and determinism") {
  TempDir dir("cli_synth");
  std::ostringstream out, err;
  SynthOptions o{6, 1, dir.path() / "a"};
  REQUIRE(cmd_synth(o, out, err) == kExitOk);
  CHECK(count_ext(o.out, ".rvol") == 24);
  const auto records = read_metadata_csv(o.out / "metadata.csv");
  CHECK(records.size() == 6);

  SynthOptions again{6, 1, dir.path() / "b"};
  REQUIRE(cmd_synth(again, out, err) == kExitOk);
  for (const auto& e : fs::directory_iterator(o.out)) {
    if (e.path().filename() == "manifest.json") continue;
    CHECK(slurp(e.path()) == slurp(again.out / e.path().filename()));
  }

  SynthOptions two{2, 1, dir.path() / "c"};
  CHECK(cmd_synth(two, out, err) == kExitValidation);
}

TEST_CASE("preprocess command") {
  TempDir dir("cli_pre");
  std::ostringstream out, err;
  fs::create_directories(dir.path() / "empty");
  PreprocessOptions empty{dir.path() / "empty", dir.path() / "o1", {}, true};
  CHECK(cmd_preprocess(empty, out, err) == kExitValidation);
  CHECK(err.str().find("no volumes found") != std::string::npos);

  fs::create_directories(dir.path() / "in");
  write_rvol(Volume({50, 64, 64}, std::vector<float>(50 * 64 * 64, 9.0f)),
             dir.path() / "in" / "flat.rvol");
  Volume ramp = Volume::zeros({60, 70, 80}, VoxelType::kF32);
  for (std::size_t i = 0; i < ramp.voxel_count(); ++i) ramp.f32()[i] = i % 97;
  write_rvol(ramp, dir.path() / "in" / "ramp.rvol");

  PreprocessOptions o{dir.path() / "in", dir.path() / "o2", {}, true};
  REQUIRE(cmd_preprocess(o, out, err) == kExitOk);
  const Volume flat = read_rvol(o.out / "flat.rvol");
  CHECK(flat.dims() == Dims{50, 64, 64});
  CHECK(flat.type() == VoxelType::kU8);
  for (auto v : flat.u8()) CHECK(v == 0);
  CHECK(read_rvol(o.out / "ramp.rvol").dims() == Dims{50, 64, 64});

  PreprocessOptions same{dir.path() / "in", dir.path() / "in", {}, true};
  CHECK(cmd_preprocess(same, out, err) == kExitValidation);
}

TEST_CASE("train, eval and predict end to end") {
  TempDir dir("cli_e2e");
  std::ostringstream out, err;
  const fs::path data = dir.path() / "data";
  REQUIRE(cmd_synth(SynthOptions{12, 3, data}, out, err) == kExitOk);

  TrainOptions t;
  t.data = data;
  t.csv = data / "metadata.csv";
  t.out = dir.path() / "run";
  t.learning_rate_arg = "1e-5";
  t.max_epochs = 1;
  t.seed = 2;
  t.deterministic = true;
  REQUIRE(cmd_train(t, out, err) == kExitOk);
  for (const char* name : {"best.osvt", "last.osvt", "metrics.json", "split.txt",
                           "train_log.jsonl", "manifest.json"}) {
    CHECK(fs::exists(t.out / name));
  }
  const Json metrics = Json::parse(slurp(t.out / "metrics.json"));
  CHECK(metrics.contains("train"));
  CHECK(metrics.contains("test"));
  CHECK(slurp(t.out / "manifest.json").find("\"1e-5\"") != std::string::npos);

  EvalOptions e;
  e.model = t.out / "best.osvt";
  e.data = data;
  e.csv = t.csv;
  e.format = "json";
  CHECK(cmd_eval(e, out, err) == kExitValidation);

  e.split = t.out / "split.txt";
  std::ostringstream first, second;
  REQUIRE(cmd_eval(e, first, err) == kExitOk);
  REQUIRE(cmd_eval(e, second, err) == kExitOk);
  CHECK(first.str() == second.str());
  const Json report = Json::parse(first.str());
  CHECK(report["confusion_matrix"].size() == 3);
  CHECK(report["confusion_matrix"][0].size() == 3);
  CHECK(report["samples"] == 12);

  PredictOptions p;
  p.model = e.model;
  p.volume = data / "synth000_FLAIR.rvol";
  p.age = 61.0;
  std::ostringstream line;
  REQUIRE(cmd_predict(p, line, err) == kExitOk);
  std::istringstream fields(line.str());
  std::string word, name, probs_word;
  long long code = -1;
  double a = 0, b = 0, c = 0;
  fields >> word >> code >> name >> probs_word >> a >> b >> c;
  CHECK(word == "class");
  CHECK(code >= 0);
  CHECK(code <= 2);
  CHECK(std::abs(a + b + c - 1.0) < 1e-5);

  p.age = 0.0;
  CHECK(cmd_predict(p, line, err) == kExitValidation);

  p.age = 61.0;
  p.volume = dir.path() / "raw.rvol";
  write_rvol(Volume::zeros({155, 240, 240}, VoxelType::kU8), p.volume);
  std::ostringstream dim_err;
  CHECK(cmd_predict(p, line, dim_err) == kExitValidation);
  CHECK(dim_err.str().find("50x64x64") != std::string::npos);
}
