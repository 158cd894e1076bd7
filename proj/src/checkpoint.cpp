#include <algorithm>
#include <cstring>

#include "osvit/detail/bytes.hpp"
#include "osvit/error.hpp"
#include "osvit/model.hpp"
#include "osvit/serialize.hpp"

namespace osvit {

using detail::get_le;
using detail::put_le;

void to_json(Json& j, const Dims& d) {
  j = Json::array({d.depth, d.height, d.width});
}

void from_json(const Json& j, Dims& d) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigError("dims must be a 3-element array");
  }
  d = Dims{j[0].get<std::size_t>(), j[1].get<std::size_t>(),
           j[2].get<std::size_t>()};
}

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"input_dims", c.input_dims},
           {"patch_dims", c.patch_dims},
           {"embed_dim", c.embed_dim},
           {"num_layers", c.num_layers},
           {"num_heads", c.num_heads},
           {"head_dim", c.head_dim},
           {"mlp_dim", c.mlp_dim},
           {"num_classes", c.num_classes},
           {"age_scale_divisor", c.age_scale_divisor},
           {"dropout", c.dropout},
           {"final_norm", c.final_norm},
           {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const Json& j, ModelConfig& c) {
  c.input_dims = j.at("input_dims").get<Dims>();
  c.patch_dims = j.at("patch_dims").get<Dims>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.age_scale_divisor = j.at("age_scale_divisor").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.final_norm = j.at("final_norm").get<bool>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
}

void to_json(Json& j, const PreprocessConfig& c) {
  j = Json{{"target_dims", c.target_dims}, {"spline_order", c.spline_order}};
}

void to_json(Json& j, const SynthConfig& c) {
  j = Json{{"dims", c.dims},
           {"radius_fraction", c.radius_fraction},
           {"radius_jitter", c.radius_jitter},
           {"center_jitter_voxels", c.center_jitter_voxels},
           {"noise_std", c.noise_std},
           {"background", c.background},
           {"lesion", c.lesion},
           {"age_min", c.age_min},
           {"age_max", c.age_max}};
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kPreambleBytes = 16;  // magic + version + length

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params,
                                            const ModelConfig& config) {
  config.validate();
  const auto tensors = params.named(config);
  Json table = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    table.push_back(Json{{"name", t.name},
                         {"shape", t.tensor.shape()},
                         {"offset", offset}});
    offset += t.tensor.numel() * sizeof(float);
  }
  const Json manifest{{"config", config}, {"dtype", "f32"}, {"tensors", table}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleBytes + text.size() + offset);
  for (char c : {'O', 'S', 'V', 'T'}) out.push_back(static_cast<std::uint8_t>(c));
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : tensors) {
    for (float v : t.tensor.data()) put_le(out, v);
  }
  return out;
}

std::pair<ModelParams, ModelConfig> decode_checkpoint(
    std::span<const std::uint8_t> bytes,
    const std::optional<ModelConfig>& expected) {
  if (bytes.size() < kPreambleBytes) {
    if (bytes.size() >= 4 && !std::equal(bytes.begin(), bytes.begin() + 4, "OSVT")) {
      throw FormatError(0, "bad OSVT magic");
    }
    throw LengthError(kPreambleBytes, bytes.size(), "OSVT preamble truncated");
  }
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "OSVT")) {
    throw FormatError(0, "bad OSVT magic");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(4, "unsupported OSVT version " + std::to_string(version));
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - kPreambleBytes) {
    throw LengthError(kPreambleBytes + manifest_len, bytes.size(),
                      "OSVT manifest truncated");
  }
  const std::size_t blob_start = kPreambleBytes + manifest_len;
  Json manifest;
  try {
    manifest = Json::parse(bytes.begin() + kPreambleBytes,
                           bytes.begin() + static_cast<std::ptrdiff_t>(blob_start));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(kPreambleBytes, std::string("bad OSVT manifest: ") + e.what());
  }

  ModelConfig config;
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  try {
    config = manifest.at("config").get<ModelConfig>();
    if (manifest.at("dtype").get<std::string>() != "f32") {
      throw FormatError(kPreambleBytes, "OSVT dtype must be f32");
    }
    for (const auto& t : manifest.at("tensors")) {
      entries.push_back(Entry{t.at("name").get<std::string>(),
                              t.at("shape").get<Shape>(),
                              t.at("offset").get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(kPreambleBytes,
                      std::string("bad OSVT manifest field: ") + e.what());
  }

  // Blob extents: each tensor runs to the next offset (or end of file).
  const std::uint64_t blob_bytes = bytes.size() - blob_start;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::uint64_t begin = entries[i].offset;
    const std::uint64_t end =
        i + 1 < entries.size() ? entries[i + 1].offset : blob_bytes;
    if (begin > end || end > blob_bytes) {
      throw FormatError(blob_start + std::min(begin, blob_bytes),
                        "OSVT tensor '" + entries[i].name +
                            "' offset outside blob region");
    }
    const std::uint64_t declared = shape_numel(entries[i].shape) * sizeof(float);
    if (declared != end - begin) {
      throw LengthError(declared, end - begin,
                        "OSVT tensor '" + entries[i].name + "' " +
                            shape_to_string(entries[i].shape) + " blob");
    }
  }

  if (expected) {
    const auto diff = expected->differences(config);
    if (!diff.empty()) {
      std::string fields;
      for (const auto& f : diff) fields += (fields.empty() ? "" : ", ") + f;
      throw ConfigError("checkpoint config conflicts with runtime config: " +
                        fields);
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(kPreambleBytes, std::string("invalid OSVT config: ") + e.what());
  }

  ModelParams params = ModelParams::zeros(config);
  auto slots = params.named(config);
  if (slots.size() != entries.size()) {
    throw FormatError(kPreambleBytes,
                      "OSVT tensor table has " + std::to_string(entries.size()) +
                          " entries, config implies " +
                          std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != entries[i].name ||
        slots[i].tensor.shape() != entries[i].shape) {
      throw FormatError(kPreambleBytes,
                        "OSVT tensor " + std::to_string(i) + " is '" +
                            entries[i].name + "' " +
                            shape_to_string(entries[i].shape) + ", expected '" +
                            slots[i].name + "' " +
                            shape_to_string(slots[i].tensor.shape()));
    }
    auto dst = slots[i].tensor.data();
    const std::size_t base = blob_start + entries[i].offset;
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = get_le<float>(bytes, base + k * sizeof(float));
    }
  }
  return {std::move(params), config};
}

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path) {
  write_file_bytes(encode_checkpoint(params, config), path);
}

std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::filesystem::path& path,
    const std::optional<ModelConfig>& expected) {
  return decode_checkpoint(read_file_bytes(path), expected);
}

}  // namespace osvit
