#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "osvit/volume_io.hpp"

namespace osvit {

// Integer codes are part of the checkpoint/report contract.
enum class SurvivalClass : std::int64_t { kLong = 0, kMedium = 1, kShort = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::int64_t kShortBelowDays = 260;
inline constexpr std::int64_t kLongFromDays = 470;

std::string_view class_name(SurvivalClass c);

enum class Sequence { kT1, kT1CE, kT2, kFLAIR };

inline constexpr std::array<Sequence, 4> kAllSequences = {
    Sequence::kT1, Sequence::kT1CE, Sequence::kT2, Sequence::kFLAIR};

std::string_view to_string(Sequence s);
// Case-insensitive.
std::optional<Sequence> parse_sequence(std::string_view text);

struct Sample {
  std::string subject_id;
  Sequence sequence = Sequence::kT1;
  std::shared_ptr<const Volume> volume;
  float age = 0.0f;
  SurvivalClass label = SurvivalClass::kLong;
};

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::uint64_t seed = 0;
};

// [0, 260) -> Short, [260, 470) -> Medium, [470, inf) -> Long.
SurvivalClass derive_label(std::int64_t survival_days);
SurvivalClass derive_label(std::optional<std::int64_t> survival_days);

// Keeps GTR subjects with known survival, preserving order.
std::vector<SubjectRecord> filter_cohort(std::span<const SubjectRecord> records);

// Returns nullptr when the (subject, sequence) volume is unavailable.
using VolumeLookup = std::function<std::shared_ptr<const Volume>(
    const std::string& subject_id, Sequence sequence)>;

// Four samples per record (T1, T1CE, T2, FLAIR order). When expected_dims is
// set, every volume must be u8 with exactly those dims.
std::vector<Sample> build_samples(std::span<const SubjectRecord> records,
                                  const VolumeLookup& lookup,
                                  std::optional<Dims> expected_dims = {});

// Distinct subject ids in first-appearance order.
std::vector<std::string> subject_ids(std::span<const Sample> samples);

// Subjects are shuffled with Rng(seed); the first floor(fraction * n) go to
// train. Every sample follows its subject.
DatasetSplit split_by_subject(std::span<const Sample> samples,
                              double train_fraction, std::uint64_t seed);

// Text manifest, one "subject_id,partition" line per subject.
std::string format_split_manifest(const DatasetSplit& split);
void write_split_manifest(const DatasetSplit& split,
                          const std::filesystem::path& path);
// subject_id -> partition name ("train" / "test").
std::map<std::string, std::string> read_split_manifest(
    const std::filesystem::path& path);

// Synthetic phantom cohort. Each subject gets a centered bright ellipsoid
// whose semi-axes (as a fraction of the half-extent) grow with the class
// code, over a per-sequence background, plus Gaussian noise.
struct SynthConfig {
  Dims dims{50, 64, 64};
  std::array<double, kNumClasses> radius_fraction{0.25, 0.45, 0.65};
  double radius_jitter = 0.03;
  double center_jitter_voxels = 2.0;
  double noise_std = 4.0;
  std::array<double, 4> background{8.0, 8.0, 12.0, 10.0};
  std::array<double, 4> lesion{140.0, 200.0, 180.0, 220.0};
  double age_min = 40.0;
  double age_max = 80.0;
};

struct SynthSubject {
  SubjectRecord record;
  SurvivalClass label = SurvivalClass::kLong;
  double radius_fraction = 0.0;
  std::array<std::shared_ptr<const Volume>, 4> volumes;  // kAllSequences order
};

struct SynthCohort {
  std::vector<SynthSubject> subjects;
  SynthConfig config;

  std::vector<SubjectRecord> records() const;
  VolumeLookup lookup() const;
};

SynthCohort synth_generate(std::size_t n_subjects, std::uint64_t seed,
                           const SynthConfig& config = {});

}  // namespace osvit
