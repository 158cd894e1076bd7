#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "osvit/dataset.hpp"
#include "osvit/error.hpp"
#include "support.hpp"

using namespace osvit;

namespace {

SubjectRecord record(std::string id, std::optional<std::int64_t> days,
                     Resection r = Resection::kGTR, float age = 60.0f) {
  return SubjectRecord{std::move(id), age, days, r};
}

VolumeLookup shared_lookup(Dims dims = {50, 64, 64}) {
  auto v = std::make_shared<const Volume>(Volume::zeros(dims, VoxelType::kU8));
  return [v](const std::string&, Sequence) { return v; };
}

std::vector<Sample> cohort_samples(std::size_t n) {
  std::vector<SubjectRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    records.push_back(record("p" + std::to_string(i), 100 + 10 * i));
  }
  return build_samples(records, shared_lookup());
}

}  // namespace

TEST_CASE("survival thresholds") {
  CHECK(derive_label(100) == SurvivalClass::kShort);
  CHECK(derive_label(300) == SurvivalClass::kMedium);
  CHECK(derive_label(600) == SurvivalClass::kLong);
  CHECK(derive_label(260) == SurvivalClass::kMedium);
  CHECK(derive_label(259) == SurvivalClass::kShort);
  CHECK(derive_label(470) == SurvivalClass::kLong);
  CHECK(static_cast<int>(SurvivalClass::kShort) == 2);
  CHECK_THROWS_AS(derive_label(std::optional<std::int64_t>{}), ConfigError);
  CHECK_THROWS_AS(derive_label(-1), ConfigError);
}

TEST_CASE("cohort filter keeps GTR with known survival") {
  const std::vector<SubjectRecord> in{
      record("a", 400), record("b", 400, Resection::kSTR),
      record("c", std::nullopt), record("d", 10, Resection::kNA),
      record("e", 900)};
  const auto kept = filter_cohort(in);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].subject_id == "a");
  CHECK(kept[1].subject_id == "e");
}

TEST_CASE("samples fan out per sequence") {
  const std::vector<SubjectRecord> one{record("s", 300, Resection::kGTR, 55.5f)};
  const auto samples = build_samples(one, shared_lookup());
  REQUIRE(samples.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(samples[i].sequence == kAllSequences[i]);
    CHECK(samples[i].label == SurvivalClass::kMedium);
    CHECK(samples[i].age == 55.5f);
  }
  CHECK(cohort_samples(118).size() == 472);

  auto base = shared_lookup();
  const VolumeLookup no_flair = [base](const std::string& id, Sequence s) {
    return s == Sequence::kFLAIR ? nullptr : base(id, s);
  };
  try {
    build_samples(one, no_flair);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("FLAIR") != std::string::npos);
  }

  CHECK_THROWS_AS(build_samples(one, shared_lookup({10, 10, 10}), Dims{50, 64, 64}),
                  DimensionError);
}

TEST_CASE("subject-exclusive split") {
  const auto samples = cohort_samples(118);
  const auto split = split_by_subject(samples, 0.8, 5);
  CHECK(split.train.size() == 376);
  CHECK(split.test.size() == 96);
  CHECK(subject_ids(split.train).size() == 94);
  CHECK(subject_ids(split.test).size() == 24);

  std::map<std::string, std::set<int>> where;
  for (const auto& s : split.train) where[s.subject_id].insert(0);
  for (const auto& s : split.test) where[s.subject_id].insert(1);
  CHECK(where.size() == 118);
  for (const auto& [id, parts] : where) CHECK(parts.size() == 1);

  const auto again = split_by_subject(samples, 0.8, 5);
  CHECK(subject_ids(again.train) == subject_ids(split.train));
  CHECK(subject_ids(split_by_subject(samples, 0.8, 6).train) !=
        subject_ids(split.train));
  CHECK_THROWS_AS(split_by_subject(samples, 1.0, 5), ConfigError);
}

TEST_CASE("split manifest round trip") {
  const auto split = split_by_subject(cohort_samples(10), 0.8, 1);
  osvit::testing::TempDir dir("split");
  write_split_manifest(split, dir.path() / "split.txt");
  const auto parts = read_split_manifest(dir.path() / "split.txt");
  CHECK(parts.size() == 10);
  for (const auto& id : subject_ids(split.train)) CHECK(parts.at(id) == "train");
  for (const auto& id : subject_ids(split.test)) CHECK(parts.at(id) == "test");
}

TEST_CASE("synthetic cohort") {
  const auto cohort = synth_generate(6, 1);
  const auto samples = build_samples(cohort.records(), cohort.lookup());
  CHECK(samples.size() == 24);
  std::map<SurvivalClass, int> counts;
  for (const auto& s : cohort.subjects) {
    ++counts[s.label];
    CHECK(derive_label(s.record.survival_days) == s.label);
    CHECK(s.record.age >= 40.0f);
    CHECK(s.record.age <= 80.0f);
    CHECK(s.volumes[0]->dims() == Dims{50, 64, 64});
  }
  CHECK(counts[SurvivalClass::kShort] == 2);
  CHECK(counts[SurvivalClass::kMedium] == 2);
  CHECK(counts[SurvivalClass::kLong] == 2);

  const auto again = synth_generate(6, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t s = 0; s < 4; ++s) {
      CHECK(*again.subjects[i].volumes[s] == *cohort.subjects[i].volumes[s]);
    }
  }

  const auto seven = synth_generate(7, 3);
  std::map<SurvivalClass, int> c7;
  for (const auto& s : seven.subjects) ++c7[s.label];
  for (auto& [k, v] : c7) CHECK((v == 2 || v == 3));

  CHECK_THROWS_AS(synth_generate(2, 1), ConfigError);
}

TEST_CASE("synthetic lesion size orders the classes") {
  const auto cohort = synth_generate(9, 4);
  const SynthConfig& config = cohort.config;
  const double threshold = (config.background[3] + config.lesion[3]) / 2.0;
  std::map<SurvivalClass, std::vector<double>> radii;
  for (const auto& s : cohort.subjects) {
    std::size_t bright = 0;
    for (auto v : s.volumes[3]->u8()) bright += v > threshold;
    // Equivalent sphere radius as a fraction of the half-extents.
    const double half = 25.0 * 32.0 * 32.0;
    const double r = std::cbrt(bright / (4.0 / 3.0 * M_PI * half));
    CHECK(std::abs(r - s.radius_fraction) < 0.02);
    radii[s.label].push_back(r);
  }
  auto mean = [](const std::vector<double>& v) {
    double t = 0;
    for (double x : v) t += x;
    return t / v.size();
  };
  CHECK(mean(radii[SurvivalClass::kShort]) > mean(radii[SurvivalClass::kMedium]));
  CHECK(mean(radii[SurvivalClass::kMedium]) > mean(radii[SurvivalClass::kLong]));
}
