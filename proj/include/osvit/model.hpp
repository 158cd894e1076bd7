#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osvit/rng.hpp"
#include "osvit/tensor.hpp"
#include "osvit/volume_io.hpp"

namespace osvit {

struct ModelConfig {
  Dims input_dims{50, 64, 64};
  Dims patch_dims{5, 8, 8};
  std::size_t embed_dim = 192;
  std::size_t num_layers = 2;
  std::size_t num_heads = 12;
  std::size_t head_dim = 16;
  std::size_t mlp_dim = 1536;
  std::size_t num_classes = 3;
  // Age enters the head as age / age_scale_divisor.
  double age_scale_divisor = 10.0;
  double dropout = 0.0;
  // LayerNorm over the encoder output before the class token is read.
  bool final_norm = true;
  double layer_norm_eps = 1e-6;

  void validate() const;

  Dims patch_grid() const;
  std::size_t num_patches() const;
  std::size_t patch_volume() const;

  // Names of fields whose values differ from `other`.
  std::vector<std::string> differences(const ModelConfig& other) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct EncoderLayerParams {
  BasicTensor<T> ln1_gamma, ln1_beta;
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // weights are [in x out]
  BasicTensor<T> ln2_gamma, ln2_beta;
  BasicTensor<T> w1, b1, w2, b2;
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;  // shares storage with the owning params
};

// Learnable state of the network. Tensor handles alias storage, so the list
// returned by named() can be used to update parameters in place.
template <typename T>
struct BasicModelParams {
  BasicTensor<T> patch_weight;  // [embed x patch_volume], 3-D conv kernel
  BasicTensor<T> patch_bias;
  BasicTensor<T> class_token;    // [1 x embed]
  BasicTensor<T> pos_embedding;  // [(patches + 1) x embed]
  std::vector<EncoderLayerParams<T>> layers;
  BasicTensor<T> final_gamma, final_beta;  // unused when !final_norm
  BasicTensor<T> head_gamma, head_beta;    // [embed + 1]
  BasicTensor<T> head_weight;              // [(embed + 1) x classes]
  BasicTensor<T> head_bias;

  // Fixed order shared by init, checkpoints and optimizers.
  std::vector<NamedTensor<T>> named(const ModelConfig& config) const;

  // Zero-initialized tensors of the configured shapes.
  static BasicModelParams zeros(const ModelConfig& config);

  BasicModelParams clone(const ModelConfig& config) const;

  template <typename U>
  BasicModelParams<U> cast(const ModelConfig& config) const;
};

using ModelParams = BasicModelParams<float>;

// Total scalar count implied by the config.
std::size_t param_count(const ModelConfig& config);

// Truncated normal (std 0.02, cut at 2 std) for projection weights, class
// token and positional embedding; LayerNorm gamma 1, everything else 0.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Shapes observed at each stage of a forward pass.
struct ForwardTrace {
  Shape patches;
  Shape sequence;
  Shape encoded;
  Shape class_feature;
  Shape fused;
  Shape logits;
};

// [b x D x H x W] -> [b x patches x patch_volume]; patches enumerated in
// (depth, height, width) block order, each flattened row-major.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& volumes,
                        const ModelConfig& config);

// Patch projection, class token at position 0, positional embedding.
template <typename T>
BasicTensor<T> embed(const BasicTensor<T>& patches,
                     const BasicModelParams<T>& params,
                     const ModelConfig& config);

// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)).
template <typename T>
BasicTensor<T> encoder_layer(const BasicTensor<T>& x,
                             const EncoderLayerParams<T>& layer,
                             const ModelConfig& config, Rng* dropout_rng = nullptr);

// Logits [b x classes] from patch rows and ages (years).
template <typename T>
BasicTensor<T> forward_patches(const BasicTensor<T>& patches,
                               std::span<const float> ages,
                               const BasicModelParams<T>& params,
                               const ModelConfig& config,
                               ForwardTrace* trace = nullptr,
                               Rng* dropout_rng = nullptr);

// Logits [b x classes] from volumes scaled to [0, 1].
template <typename T>
BasicTensor<T> forward(const BasicTensor<T>& volumes,
                       std::span<const float> ages,
                       const BasicModelParams<T>& params,
                       const ModelConfig& config, ForwardTrace* trace = nullptr,
                       Rng* dropout_rng = nullptr);

// Stacks u8 volumes into [b x D x H x W], dividing by 255.
template <typename T>
BasicTensor<T> volumes_to_tensor(std::span<const Volume* const> volumes,
                                 const ModelConfig& config);

// OSVT checkpoint, little-endian:
//   "OSVT" | u32 version=1 | u64 manifest length | JSON manifest |
//   f32 tensor blobs in manifest order.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params,
                                            const ModelConfig& config);
// When `expected` is given, any config difference is a ConfigError naming
// the differing fields.
std::pair<ModelParams, ModelConfig> decode_checkpoint(
    std::span<const std::uint8_t> bytes,
    const std::optional<ModelConfig>& expected = std::nullopt);

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path);
std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::filesystem::path& path,
    const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace osvit
