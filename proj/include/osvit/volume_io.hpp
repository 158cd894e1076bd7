#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace osvit {

enum class VoxelType : std::uint8_t { kU8 = 0, kF32 = 1 };

struct Dims {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return depth * height * width; }
  std::string to_string() const;  // "DxHxW"
  friend bool operator==(const Dims&, const Dims&) = default;
};

// Parses "50x64x64" (depth x height x width).
Dims parse_dims(const std::string& text);

// 3-D scalar grid, index = (d * H + h) * W + w.
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, std::vector<std::uint8_t> data);
  Volume(Dims dims, std::vector<float> data);

  static Volume zeros(Dims dims, VoxelType type);

  const Dims& dims() const { return dims_; }
  VoxelType type() const {
    return std::holds_alternative<std::vector<float>>(data_) ? VoxelType::kF32
                                                             : VoxelType::kU8;
  }
  std::size_t voxel_count() const { return dims_.count(); }

  std::span<const std::uint8_t> u8() const;
  std::span<std::uint8_t> u8();
  std::span<const float> f32() const;
  std::span<float> f32();

  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
    return (d * dims_.height + h) * dims_.width + w;
  }
  // Voxel value as float regardless of storage type.
  float value(std::size_t d, std::size_t h, std::size_t w) const;

  // Copy converted to f32 storage.
  Volume to_f32() const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Dims dims_;
  std::variant<std::vector<std::uint8_t>, std::vector<float>> data_;
};

inline constexpr std::size_t kRvolHeaderBytes = 20;

// RVOL container, little-endian:
//   "RVOL" | u8 version=1 | u8 dtype (0=u8, 1=f32) | 2 zero bytes |
//   u32 depth | u32 height | u32 width | voxel data in Volume index order.
std::vector<std::uint8_t> encode_rvol(const Volume& volume);
Volume decode_rvol(std::span<const std::uint8_t> bytes);
Volume read_rvol(const std::filesystem::path& path);
void write_rvol(const Volume& volume, const std::filesystem::path& path);

// Uncompressed single-file NIfTI-1 (.nii) with 3-D dims and datatype
// u8/i16/u16/f32. NIfTI x/y/z map to width/height/depth. Voxels are returned
// as f32 with scl_slope/scl_inter applied when the slope is nonzero.
Volume decode_nifti(std::span<const std::uint8_t> bytes);
Volume read_nifti_subset(const std::filesystem::path& path);

// Dispatches on extension: .rvol or .nii.
Volume read_volume(const std::filesystem::path& path);

enum class Resection { kGTR, kSTR, kNA };

std::string to_string(Resection r);

struct SubjectRecord {
  std::string subject_id;
  float age = 0.0f;
  std::optional<std::int64_t> survival_days;
  Resection resection = Resection::kNA;

  friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

// Columns: subject_id, age, survival_days, extent_of_resection (any order).
std::vector<SubjectRecord> parse_metadata_csv(const std::string& text);
std::vector<SubjectRecord> read_metadata_csv(const std::filesystem::path& path);
std::string format_metadata_csv(std::span<const SubjectRecord> records);
void write_metadata_csv(std::span<const SubjectRecord> records,
                        const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(std::span<const std::uint8_t> bytes,
                      const std::filesystem::path& path);

}  // namespace osvit
