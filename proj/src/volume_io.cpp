#include "osvit/volume_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "osvit/detail/bytes.hpp"
#include "osvit/error.hpp"

namespace osvit {

using detail::get_le;
using detail::put_le;

std::string Dims::to_string() const {
  return std::to_string(depth) + "x" + std::to_string(height) + "x" +
         std::to_string(width);
}

Dims parse_dims(const std::string& text) {
  std::size_t values[3] = {0, 0, 0};
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (int i = 0; i < 3; ++i) {
    auto [next, ec] = std::from_chars(p, end, values[i]);
    if (ec != std::errc() || values[i] == 0) {
      throw ConfigError("invalid dims '" + text + "', expected DxHxW");
    }
    p = next;
    if (i < 2) {
      if (p == end || (*p != 'x' && *p != 'X')) {
        throw ConfigError("invalid dims '" + text + "', expected DxHxW");
      }
      ++p;
    }
  }
  if (p != end) throw ConfigError("invalid dims '" + text + "', expected DxHxW");
  return Dims{values[0], values[1], values[2]};
}

namespace {

void check_dims(const Dims& dims, std::size_t size) {
  if (dims.depth == 0 || dims.height == 0 || dims.width == 0) {
    throw DimensionError("volume extents must be positive, got " +
                         dims.to_string());
  }
  if (dims.count() != size) {
    throw DimensionError("volume " + dims.to_string() + " needs " +
                         std::to_string(dims.count()) + " voxels, buffer has " +
                         std::to_string(size));
  }
}

}  // namespace

Volume::Volume(Dims dims, std::vector<std::uint8_t> data)
    : dims_(dims), data_(std::move(data)) {
  check_dims(dims_, std::get<0>(data_).size());
}

Volume::Volume(Dims dims, std::vector<float> data)
    : dims_(dims), data_(std::move(data)) {
  check_dims(dims_, std::get<1>(data_).size());
}

Volume Volume::zeros(Dims dims, VoxelType type) {
  if (type == VoxelType::kU8) {
    return Volume(dims, std::vector<std::uint8_t>(dims.count(), 0));
  }
  return Volume(dims, std::vector<float>(dims.count(), 0.0f));
}

std::span<const std::uint8_t> Volume::u8() const {
  if (type() != VoxelType::kU8) throw UsageError("volume is not u8");
  return std::get<0>(data_);
}
std::span<std::uint8_t> Volume::u8() {
  if (type() != VoxelType::kU8) throw UsageError("volume is not u8");
  return std::get<0>(data_);
}
std::span<const float> Volume::f32() const {
  if (type() != VoxelType::kF32) throw UsageError("volume is not f32");
  return std::get<1>(data_);
}
std::span<float> Volume::f32() {
  if (type() != VoxelType::kF32) throw UsageError("volume is not f32");
  return std::get<1>(data_);
}

float Volume::value(std::size_t d, std::size_t h, std::size_t w) const {
  const std::size_t i = index(d, h, w);
  if (type() == VoxelType::kU8) return std::get<0>(data_)[i];
  return std::get<1>(data_)[i];
}

Volume Volume::to_f32() const {
  if (type() == VoxelType::kF32) return *this;
  const auto& src = std::get<0>(data_);
  return Volume(dims_, std::vector<float>(src.begin(), src.end()));
}

// --- RVOL ------------------------------------------------------------------

std::vector<std::uint8_t> encode_rvol(const Volume& volume) {
  std::vector<std::uint8_t> out;
  const std::size_t elem = volume.type() == VoxelType::kU8 ? 1 : 4;
  out.reserve(kRvolHeaderBytes + volume.voxel_count() * elem);
  for (char c : {'R', 'V', 'O', 'L'}) out.push_back(static_cast<std::uint8_t>(c));
  out.push_back(1);
  out.push_back(static_cast<std::uint8_t>(volume.type()));
  out.push_back(0);
  out.push_back(0);
  const Dims& d = volume.dims();
  for (std::size_t extent : {d.depth, d.height, d.width}) {
    if (extent > UINT32_MAX) throw UnsupportedError("RVOL extent exceeds u32");
    put_le(out, static_cast<std::uint32_t>(extent));
  }
  if (volume.type() == VoxelType::kU8) {
    auto data = volume.u8();
    out.insert(out.end(), data.begin(), data.end());
  } else {
    for (float v : volume.f32()) put_le(out, v);
  }
  return out;
}

Volume decode_rvol(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) {
    throw LengthError(kRvolHeaderBytes, bytes.size(), "RVOL header truncated");
  }
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "RVOL")) {
    throw FormatError(0, "bad RVOL magic");
  }
  if (bytes.size() < kRvolHeaderBytes) {
    throw LengthError(kRvolHeaderBytes, bytes.size(), "RVOL header truncated");
  }
  if (bytes[4] != 1) {
    throw FormatError(4, "unsupported RVOL version " + std::to_string(bytes[4]));
  }
  if (bytes[5] > 1) {
    throw FormatError(5, "unknown RVOL dtype code " + std::to_string(bytes[5]));
  }
  if (bytes[6] != 0 || bytes[7] != 0) {
    throw FormatError(bytes[6] != 0 ? 6 : 7, "RVOL reserved bytes not zero");
  }
  Dims dims{get_le<std::uint32_t>(bytes, 8), get_le<std::uint32_t>(bytes, 12),
            get_le<std::uint32_t>(bytes, 16)};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t extent = i == 0 ? dims.depth : i == 1 ? dims.height
                                                            : dims.width;
    if (extent == 0) throw FormatError(8 + 4 * i, "RVOL extent is zero");
  }
  const auto type = static_cast<VoxelType>(bytes[5]);
  const std::size_t elem = type == VoxelType::kU8 ? 1 : 4;
  const std::uint64_t expected = kRvolHeaderBytes + dims.count() * elem;
  if (bytes.size() != expected) {
    throw LengthError(expected, bytes.size(), "RVOL data size mismatch");
  }
  const auto payload = bytes.subspan(kRvolHeaderBytes);
  if (type == VoxelType::kU8) {
    return Volume(dims, std::vector<std::uint8_t>(payload.begin(), payload.end()));
  }
  std::vector<float> data(dims.count());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = get_le<float>(payload, i * 4);
  }
  return Volume(dims, std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file_bytes(std::span<const std::uint8_t> bytes,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Volume read_rvol(const std::filesystem::path& path) {
  return decode_rvol(read_file_bytes(path));
}

void write_rvol(const Volume& volume, const std::filesystem::path& path) {
  write_file_bytes(encode_rvol(volume), path);
}

// --- NIfTI-1 -----------------------------------------------------------------

namespace {

constexpr std::size_t kNiftiHeaderBytes = 348;
constexpr std::size_t kNiftiDimOffset = 40;
constexpr std::size_t kNiftiDatatypeOffset = 70;
constexpr std::size_t kNiftiVoxOffset = 108;
constexpr std::size_t kNiftiSlopeOffset = 112;
constexpr std::size_t kNiftiInterOffset = 116;
constexpr std::size_t kNiftiMagicOffset = 344;

enum NiftiType : std::int16_t {
  kNiftiU8 = 2,
  kNiftiI16 = 4,
  kNiftiF32 = 16,
  kNiftiU16 = 512,
};

}  // namespace

Volume decode_nifti(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B) {
    throw UnsupportedError("NIfTI: gzip-compressed input (.nii.gz) is not "
                           "supported; decompress first");
  }
  if (bytes.size() < kNiftiHeaderBytes) {
    throw LengthError(kNiftiHeaderBytes, bytes.size(), "NIfTI header truncated");
  }
  bool swap = false;
  if (get_le<std::int32_t>(bytes, 0) != 348) {
    if (get_le<std::int32_t>(bytes, 0, true) != 348) {
      throw FormatError(0, "NIfTI sizeof_hdr is not 348");
    }
    swap = true;
  }
  static constexpr char kMagic[4] = {'n', '+', '1', '\0'};
  if (!std::equal(kMagic, kMagic + 4, bytes.begin() + kNiftiMagicOffset)) {
    throw FormatError(kNiftiMagicOffset,
                      "NIfTI magic is not \"n+1\" (single-file NIfTI-1)");
  }

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) {
    dim[i] = get_le<std::int16_t>(bytes, kNiftiDimOffset + 2 * i, swap);
  }
  if (dim[0] < 3 || dim[0] > 7) {
    throw UnsupportedError("NIfTI dim[0] = " + std::to_string(dim[0]) +
                           ", only 3-D volumes are supported");
  }
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) {
      throw UnsupportedError("NIfTI dim[" + std::to_string(i) + "] = " +
                             std::to_string(dim[i]) +
                             ", only 3-D volumes are supported");
    }
  }
  for (int i = 1; i <= 3; ++i) {
    if (dim[i] <= 0) {
      throw FormatError(kNiftiDimOffset + 2 * i,
                        "NIfTI dim[" + std::to_string(i) + "] not positive");
    }
  }

  const auto datatype =
      get_le<std::int16_t>(bytes, kNiftiDatatypeOffset, swap);
  std::size_t elem = 0;
  switch (datatype) {
    case kNiftiU8: elem = 1; break;
    case kNiftiI16:
    case kNiftiU16: elem = 2; break;
    case kNiftiF32: elem = 4; break;
    default:
      throw UnsupportedError("NIfTI datatype " + std::to_string(datatype) +
                             " not supported (u8, i16, u16, f32 only)");
  }

  const float vox_offset = get_le<float>(bytes, kNiftiVoxOffset, swap);
  if (!(vox_offset >= static_cast<float>(kNiftiHeaderBytes))) {
    throw FormatError(kNiftiVoxOffset, "NIfTI vox_offset before end of header");
  }
  const auto start = static_cast<std::size_t>(vox_offset);
  const Dims dims{static_cast<std::size_t>(dim[3]),
                  static_cast<std::size_t>(dim[2]),
                  static_cast<std::size_t>(dim[1])};
  const std::uint64_t needed = start + dims.count() * elem;
  if (bytes.size() < needed) {
    throw LengthError(needed, bytes.size(), "NIfTI voxel data truncated");
  }

  const float slope = get_le<float>(bytes, kNiftiSlopeOffset, swap);
  const float inter = get_le<float>(bytes, kNiftiInterOffset, swap);
  const bool scaled = slope != 0.0f && std::isfinite(slope);

  std::vector<float> data(dims.count());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t at = start + i * elem;
    float v = 0.0f;
    switch (datatype) {
      case kNiftiU8: v = bytes[at]; break;
      case kNiftiI16: v = get_le<std::int16_t>(bytes, at, swap); break;
      case kNiftiU16: v = get_le<std::uint16_t>(bytes, at, swap); break;
      case kNiftiF32: v = get_le<float>(bytes, at, swap); break;
      default: break;
    }
    data[i] = scaled ? v * slope + inter : v;
  }
  return Volume(dims, std::move(data));
}

Volume read_nifti_subset(const std::filesystem::path& path) {
  return decode_nifti(read_file_bytes(path));
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string name = path.filename().string();
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) ==
               0;
  };
  if (ends_with(".rvol")) return read_rvol(path);
  if (ends_with(".nii")) return read_nifti_subset(path);
  if (ends_with(".nii.gz")) {
    throw UnsupportedError(path.string() +
                           ": compressed NIfTI is not supported");
  }
  throw UnsupportedError(path.string() + ": unknown volume extension");
}

// --- metadata CSV ----------------------------------------------------------

std::string to_string(Resection r) {
  switch (r) {
    case Resection::kGTR: return "GTR";
    case Resection::kSTR: return "STR";
    case Resection::kNA: return "NA";
  }
  return "NA";
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t begin = 0;
  for (;;) {
    const std::size_t comma = line.find(',', begin);
    fields.push_back(trim(std::string_view(line).substr(
        begin, comma == std::string::npos ? std::string::npos : comma - begin)));
    if (comma == std::string::npos) break;
    begin = comma + 1;
  }
  return fields;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::vector<SubjectRecord> parse_metadata_csv(const std::string& text) {
  static const char* kColumns[] = {"subject_id", "age", "survival_days",
                                   "extent_of_resection"};
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;

  std::map<std::string, std::size_t> column_of;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto header = split_fields(line);
    for (std::size_t i = 0; i < header.size(); ++i) {
      column_of[header[i]] = i;
    }
    for (const char* col : kColumns) {
      if (!column_of.contains(col)) {
        throw ParseError(line_no, std::string("missing column '") + col + "'");
      }
    }
    have_header = true;
  }
  if (!have_header) throw ParseError(1, "empty metadata CSV");

  const std::size_t c_id = column_of["subject_id"];
  const std::size_t c_age = column_of["age"];
  const std::size_t c_days = column_of["survival_days"];
  const std::size_t c_res = column_of["extent_of_resection"];
  const std::size_t width = column_of.size();

  std::vector<SubjectRecord> records;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != width) {
      throw ParseError(line_no, "expected " + std::to_string(width) +
                                    " fields, found " +
                                    std::to_string(f.size()));
    }
    SubjectRecord rec;
    rec.subject_id = f[c_id];
    if (rec.subject_id.empty()) throw ParseError(line_no, "empty subject_id");
    if (!seen.insert(rec.subject_id).second) {
      throw ParseError(line_no, "duplicate subject_id '" + rec.subject_id + "'");
    }

    const std::string& age = f[c_age];
    float age_value = 0.0f;
    auto [age_end, age_ec] =
        std::from_chars(age.data(), age.data() + age.size(), age_value);
    if (age.empty() || age_ec != std::errc() ||
        age_end != age.data() + age.size() || !std::isfinite(age_value)) {
      throw ParseError(line_no, "non-numeric age '" + age + "'");
    }
    if (age_value <= 0.0f) throw ParseError(line_no, "age must be positive");
    rec.age = age_value;

    const std::string& days = f[c_days];
    if (!days.empty()) {
      std::int64_t d = 0;
      auto [end, ec] = std::from_chars(days.data(), days.data() + days.size(), d);
      if (ec != std::errc() || end != days.data() + days.size()) {
        throw ParseError(line_no, "non-integer survival_days '" + days + "'");
      }
      if (d < 0) throw ParseError(line_no, "negative survival_days");
      rec.survival_days = d;
    }

    const std::string res = upper(f[c_res]);
    if (res == "GTR") {
      rec.resection = Resection::kGTR;
    } else if (res == "STR") {
      rec.resection = Resection::kSTR;
    } else if (res == "NA") {
      rec.resection = Resection::kNA;
    } else {
      throw ParseError(line_no,
                       "extent_of_resection must be GTR, STR or NA, got '" +
                           f[c_res] + "'");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<SubjectRecord> read_metadata_csv(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_metadata_csv(std::string(bytes.begin(), bytes.end()));
}

std::string format_metadata_csv(std::span<const SubjectRecord> records) {
  std::string out = "subject_id,age,survival_days,extent_of_resection\n";
  for (const auto& r : records) {
    char age[32];
    auto res = std::to_chars(age, age + sizeof(age), r.age);
    out += r.subject_id;
    out += ',';
    out.append(age, res.ptr);
    out += ',';
    if (r.survival_days) out += std::to_string(*r.survival_days);
    out += ',';
    out += to_string(r.resection);
    out += '\n';
  }
  return out;
}

void write_metadata_csv(std::span<const SubjectRecord> records,
                        const std::filesystem::path& path) {
  const std::string text = format_metadata_csv(records);
  write_file_bytes(std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                             text.size()),
                   path);
}

}  // namespace osvit
