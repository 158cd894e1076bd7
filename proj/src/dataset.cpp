#include "osvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "osvit/error.hpp"
#include "osvit/rng.hpp"

namespace osvit {

std::string_view class_name(SurvivalClass c) {
  switch (c) {
    case SurvivalClass::kLong: return "long";
    case SurvivalClass::kMedium: return "medium";
    case SurvivalClass::kShort: return "short";
  }
  return "unknown";
}

std::string_view to_string(Sequence s) {
  switch (s) {
    case Sequence::kT1: return "T1";
    case Sequence::kT1CE: return "T1CE";
    case Sequence::kT2: return "T2";
    case Sequence::kFLAIR: return "FLAIR";
  }
  return "?";
}

std::optional<Sequence> parse_sequence(std::string_view text) {
  std::string up(text);
  for (char& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (Sequence s : kAllSequences) {
    if (up == to_string(s)) return s;
  }
  return std::nullopt;
}

SurvivalClass derive_label(std::int64_t survival_days) {
  if (survival_days < 0) {
    throw ConfigError("survival_days must be non-negative, got " +
                      std::to_string(survival_days));
  }
  if (survival_days < kShortBelowDays) return SurvivalClass::kShort;
  if (survival_days < kLongFromDays) return SurvivalClass::kMedium;
  return SurvivalClass::kLong;
}

SurvivalClass derive_label(std::optional<std::int64_t> survival_days) {
  if (!survival_days) {
    throw ConfigError("subject has no survival_days and cannot be labeled");
  }
  return derive_label(*survival_days);
}

std::vector<SubjectRecord> filter_cohort(
    std::span<const SubjectRecord> records) {
  std::vector<SubjectRecord> kept;
  for (const auto& r : records) {
    if (r.resection == Resection::kGTR && r.survival_days) kept.push_back(r);
  }
  return kept;
}

std::vector<Sample> build_samples(std::span<const SubjectRecord> records,
                                  const VolumeLookup& lookup,
                                  std::optional<Dims> expected_dims) {
  std::vector<Sample> samples;
  samples.reserve(records.size() * kAllSequences.size());
  for (const auto& rec : records) {
    const SurvivalClass label = derive_label(rec.survival_days);
    if (!(rec.age > 0.0f)) {
      throw ConfigError("subject " + rec.subject_id + ": age must be positive");
    }
    std::string missing;
    std::array<std::shared_ptr<const Volume>, 4> found;
    for (std::size_t i = 0; i < kAllSequences.size(); ++i) {
      found[i] = lookup(rec.subject_id, kAllSequences[i]);
      if (!found[i]) {
        if (!missing.empty()) missing += ", ";
        missing += to_string(kAllSequences[i]);
      }
    }
    if (!missing.empty()) {
      throw IoError("subject " + rec.subject_id + ": missing sequences " +
                    missing);
    }
    for (std::size_t i = 0; i < kAllSequences.size(); ++i) {
      if (expected_dims) {
        if (found[i]->type() != VoxelType::kU8 ||
            found[i]->dims() != *expected_dims) {
          throw DimensionError(
              "subject " + rec.subject_id + " " +
              std::string(to_string(kAllSequences[i])) + ": expected u8 " +
              expected_dims->to_string() + " volume, got " +
              found[i]->dims().to_string() +
              " (run the preprocess command first)");
        }
      }
      samples.push_back(
          Sample{rec.subject_id, kAllSequences[i], found[i], rec.age, label});
    }
  }
  return samples;
}

std::vector<std::string> subject_ids(std::span<const Sample> samples) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.subject_id).second) ids.push_back(s.subject_id);
  }
  return ids;
}

DatasetSplit split_by_subject(std::span<const Sample> samples,
                              double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  std::vector<std::string> ids = subject_ids(samples);
  if (ids.size() < 2) {
    throw ConfigError("split needs at least 2 subjects, got " +
                      std::to_string(ids.size()));
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(ids));
  const auto n_train = static_cast<std::size_t>(
      std::floor(train_fraction * static_cast<double>(ids.size())));
  std::set<std::string> train_ids(ids.begin(),
                                  ids.begin() + static_cast<std::ptrdiff_t>(n_train));

  DatasetSplit split;
  split.seed = seed;
  for (const auto& s : samples) {
    (train_ids.contains(s.subject_id) ? split.train : split.test).push_back(s);
  }
  return split;
}

std::string format_split_manifest(const DatasetSplit& split) {
  std::string out;
  for (const auto* part : {&split.train, &split.test}) {
    const char* name = part == &split.train ? "train" : "test";
    for (const auto& id : subject_ids(*part)) {
      out += id;
      out += ',';
      out += name;
      out += '\n';
    }
  }
  return out;
}

void write_split_manifest(const DatasetSplit& split,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_split_manifest(split);
  if (!out) throw IoError("write failed: " + path.string());
}

std::map<std::string, std::string> read_split_manifest(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split manifest " + path.string());
  std::map<std::string, std::string> partition_of;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) {
      throw ParseError(line_no, "expected subject_id,partition");
    }
    const std::string part = line.substr(comma + 1);
    if (part != "train" && part != "test") {
      throw ParseError(line_no, "unknown partition '" + part + "'");
    }
    partition_of[line.substr(0, comma)] = part;
  }
  return partition_of;
}

// --- synthetic cohort ------------------------------------------------------

std::vector<SubjectRecord> SynthCohort::records() const {
  std::vector<SubjectRecord> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back(s.record);
  return out;
}

VolumeLookup SynthCohort::lookup() const {
  std::unordered_map<std::string, std::array<std::shared_ptr<const Volume>, 4>>
      table;
  for (const auto& s : subjects) table[s.record.subject_id] = s.volumes;
  return [table = std::move(table)](const std::string& id, Sequence seq)
             -> std::shared_ptr<const Volume> {
    auto it = table.find(id);
    if (it == table.end()) return nullptr;
    return it->second[static_cast<std::size_t>(seq)];
  };
}

SynthCohort synth_generate(std::size_t n_subjects, std::uint64_t seed,
                           const SynthConfig& config) {
  if (n_subjects < 3) {
    throw ConfigError("synthetic cohort needs at least 3 subjects, got " +
                      std::to_string(n_subjects));
  }
  Rng rng(seed);
  std::vector<std::int64_t> codes(n_subjects);
  for (std::size_t i = 0; i < n_subjects; ++i) {
    codes[i] = static_cast<std::int64_t>(i % kNumClasses);
  }
  rng.shuffle(std::span<std::int64_t>(codes));

  SynthCohort cohort;
  cohort.config = config;
  const Dims dims = config.dims;
  const double half[3] = {dims.depth / 2.0, dims.height / 2.0,
                          dims.width / 2.0};

  for (std::size_t i = 0; i < n_subjects; ++i) {
    SynthSubject subject;
    subject.label = static_cast<SurvivalClass>(codes[i]);
    char id[32];
    std::snprintf(id, sizeof(id), "synth%03zu", i);
    subject.record.subject_id = id;
    subject.record.resection = Resection::kGTR;
    subject.record.age = static_cast<float>(
        std::round(rng.uniform(config.age_min, config.age_max) * 10.0) / 10.0);
    switch (subject.label) {
      case SurvivalClass::kShort:
        subject.record.survival_days =
            30 + static_cast<std::int64_t>(rng.below(kShortBelowDays - 30));
        break;
      case SurvivalClass::kMedium:
        subject.record.survival_days =
            kShortBelowDays +
            static_cast<std::int64_t>(rng.below(kLongFromDays - kShortBelowDays));
        break;
      case SurvivalClass::kLong:
        subject.record.survival_days =
            kLongFromDays + static_cast<std::int64_t>(rng.below(700));
        break;
    }

    subject.radius_fraction =
        config.radius_fraction[static_cast<std::size_t>(codes[i])] +
        rng.uniform(-config.radius_jitter, config.radius_jitter);
    double center[3];
    double semi[3];
    for (int a = 0; a < 3; ++a) {
      center[a] = (half[a] - 0.5) +
                  rng.uniform(-config.center_jitter_voxels,
                              config.center_jitter_voxels);
      semi[a] = subject.radius_fraction * half[a];
    }

    for (std::size_t s = 0; s < kAllSequences.size(); ++s) {
      std::vector<std::uint8_t> data(dims.count());
      std::size_t idx = 0;
      for (std::size_t d = 0; d < dims.depth; ++d) {
        for (std::size_t h = 0; h < dims.height; ++h) {
          for (std::size_t w = 0; w < dims.width; ++w, ++idx) {
            const double pd = (static_cast<double>(d) - center[0]) / semi[0];
            const double ph = (static_cast<double>(h) - center[1]) / semi[1];
            const double pw = (static_cast<double>(w) - center[2]) / semi[2];
            const bool inside = pd * pd + ph * ph + pw * pw <= 1.0;
            const double base =
                inside ? config.lesion[s] : config.background[s];
            const double v = base + config.noise_std * rng.normal();
            data[idx] = static_cast<std::uint8_t>(
                std::clamp(std::round(v), 0.0, 255.0));
          }
        }
      }
      subject.volumes[s] = std::make_shared<const Volume>(dims, std::move(data));
    }
    cohort.subjects.push_back(std::move(subject));
  }
  return cohort;
}

}  // namespace osvit
