#include "osvit/model.hpp"

#include <algorithm>
#include <cmath>

#include "osvit/error.hpp"
#include "osvit/ops.hpp"

namespace osvit {

void ModelConfig::validate() const {
  const std::size_t in[3] = {input_dims.depth, input_dims.height,
                             input_dims.width};
  const std::size_t patch[3] = {patch_dims.depth, patch_dims.height,
                                patch_dims.width};
  static const char* kAxis[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (in[a] == 0 || patch[a] == 0) {
      throw ConfigError(std::string("model ") + kAxis[a] +
                        " extents must be positive");
    }
    if (in[a] % patch[a] != 0) {
      throw ConfigError(std::string("input ") + kAxis[a] + " " +
                        std::to_string(in[a]) +
                        " is not divisible by patch " + kAxis[a] + " " +
                        std::to_string(patch[a]));
    }
  }
  if (num_heads * head_dim != embed_dim) {
    throw ConfigError("num_heads * head_dim (" +
                      std::to_string(num_heads * head_dim) +
                      ") must equal embed_dim (" + std::to_string(embed_dim) +
                      ")");
  }
  if (embed_dim == 0 || mlp_dim == 0 || num_classes == 0 || num_heads == 0) {
    throw ConfigError("model widths must be positive");
  }
  if (!(age_scale_divisor > 0.0)) {
    throw ConfigError("age_scale_divisor must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout must lie in [0, 1)");
  }
  if (!(layer_norm_eps >= 0.0)) {
    throw ConfigError("layer_norm_eps must be non-negative");
  }
}

Dims ModelConfig::patch_grid() const {
  return Dims{input_dims.depth / patch_dims.depth,
              input_dims.height / patch_dims.height,
              input_dims.width / patch_dims.width};
}

std::size_t ModelConfig::num_patches() const { return patch_grid().count(); }

std::size_t ModelConfig::patch_volume() const { return patch_dims.count(); }

std::vector<std::string> ModelConfig::differences(
    const ModelConfig& other) const {
  std::vector<std::string> diff;
  auto check = [&](bool same, const char* name) {
    if (!same) diff.emplace_back(name);
  };
  check(input_dims == other.input_dims, "input_dims");
  check(patch_dims == other.patch_dims, "patch_dims");
  check(embed_dim == other.embed_dim, "embed_dim");
  check(num_layers == other.num_layers, "num_layers");
  check(num_heads == other.num_heads, "num_heads");
  check(head_dim == other.head_dim, "head_dim");
  check(mlp_dim == other.mlp_dim, "mlp_dim");
  check(num_classes == other.num_classes, "num_classes");
  check(age_scale_divisor == other.age_scale_divisor, "age_scale_divisor");
  check(dropout == other.dropout, "dropout");
  check(final_norm == other.final_norm, "final_norm");
  check(layer_norm_eps == other.layer_norm_eps, "layer_norm_eps");
  return diff;
}

// --- parameters --------------------------------------------------------------

template <typename T>
std::vector<NamedTensor<T>> BasicModelParams<T>::named(
    const ModelConfig& config) const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"patch_weight", patch_weight});
  out.push_back({"patch_bias", patch_bias});
  out.push_back({"class_token", class_token});
  out.push_back({"pos_embedding", pos_embedding});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "ln1_gamma", l.ln1_gamma});
    out.push_back({p + "ln1_beta", l.ln1_beta});
    out.push_back({p + "wq", l.wq});
    out.push_back({p + "bq", l.bq});
    out.push_back({p + "wk", l.wk});
    out.push_back({p + "bk", l.bk});
    out.push_back({p + "wv", l.wv});
    out.push_back({p + "bv", l.bv});
    out.push_back({p + "wo", l.wo});
    out.push_back({p + "bo", l.bo});
    out.push_back({p + "ln2_gamma", l.ln2_gamma});
    out.push_back({p + "ln2_beta", l.ln2_beta});
    out.push_back({p + "w1", l.w1});
    out.push_back({p + "b1", l.b1});
    out.push_back({p + "w2", l.w2});
    out.push_back({p + "b2", l.b2});
  }
  if (config.final_norm) {
    out.push_back({"final_gamma", final_gamma});
    out.push_back({"final_beta", final_beta});
  }
  out.push_back({"head_gamma", head_gamma});
  out.push_back({"head_beta", head_beta});
  out.push_back({"head_weight", head_weight});
  out.push_back({"head_bias", head_bias});
  return out;
}

template <typename T>
BasicModelParams<T> BasicModelParams<T>::zeros(const ModelConfig& config) {
  config.validate();
  using Tn = BasicTensor<T>;
  const std::size_t e = config.embed_dim;
  const std::size_t m = config.mlp_dim;
  BasicModelParams p;
  p.patch_weight = Tn::zeros({e, config.patch_volume()});
  p.patch_bias = Tn::zeros({e});
  p.class_token = Tn::zeros({1, e});
  p.pos_embedding = Tn::zeros({config.num_patches() + 1, e});
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    EncoderLayerParams<T> l;
    l.ln1_gamma = Tn::zeros({e});
    l.ln1_beta = Tn::zeros({e});
    l.wq = Tn::zeros({e, e});
    l.bq = Tn::zeros({e});
    l.wk = Tn::zeros({e, e});
    l.bk = Tn::zeros({e});
    l.wv = Tn::zeros({e, e});
    l.bv = Tn::zeros({e});
    l.wo = Tn::zeros({e, e});
    l.bo = Tn::zeros({e});
    l.ln2_gamma = Tn::zeros({e});
    l.ln2_beta = Tn::zeros({e});
    l.w1 = Tn::zeros({e, m});
    l.b1 = Tn::zeros({m});
    l.w2 = Tn::zeros({m, e});
    l.b2 = Tn::zeros({e});
    p.layers.push_back(std::move(l));
  }
  p.final_gamma = Tn::zeros({e});
  p.final_beta = Tn::zeros({e});
  p.head_gamma = Tn::zeros({e + 1});
  p.head_beta = Tn::zeros({e + 1});
  p.head_weight = Tn::zeros({e + 1, config.num_classes});
  p.head_bias = Tn::zeros({config.num_classes});
  return p;
}

template <typename T>
BasicModelParams<T> BasicModelParams<T>::clone(const ModelConfig& config) const {
  return cast<T>(config);
}

template <typename T>
template <typename U>
BasicModelParams<U> BasicModelParams<T>::cast(const ModelConfig& config) const {
  BasicModelParams<U> out = BasicModelParams<U>::zeros(config);
  auto dst = out.named(config);
  auto src = named(config);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw DimensionError("parameter " + src[i].name + " has shape " +
                           shape_to_string(src[i].tensor.shape()) +
                           ", config expects " +
                           shape_to_string(dst[i].tensor.shape()));
    }
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
              dst[i].tensor.data().begin());
  }
  return out;
}

std::size_t param_count(const ModelConfig& config) {
  const std::size_t e = config.embed_dim;
  const std::size_t m = config.mlp_dim;
  const std::size_t c = config.num_classes;
  const std::size_t patch = e * config.patch_volume() + e;
  const std::size_t tokens = e + (config.num_patches() + 1) * e;
  const std::size_t attention = 4 * (e * e + e);
  const std::size_t mlp = e * m + m + m * e + e;
  const std::size_t norms = 4 * e;
  const std::size_t per_layer = attention + mlp + norms;
  const std::size_t final_norm = config.final_norm ? 2 * e : 0;
  const std::size_t head = 2 * (e + 1) + (e + 1) * c + c;
  return patch + tokens + config.num_layers * per_layer + final_norm + head;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(config);
  Rng rng(seed);
  constexpr double kStd = 0.02;
  auto normal_fill = [&](Tensor& t) {
    for (float& v : t.data()) v = static_cast<float>(rng.truncated_normal(kStd));
  };
  auto ones = [](Tensor& t) { std::fill(t.data().begin(), t.data().end(), 1.0f); };

  normal_fill(p.patch_weight);
  normal_fill(p.class_token);
  normal_fill(p.pos_embedding);
  for (auto& l : p.layers) {
    ones(l.ln1_gamma);
    normal_fill(l.wq);
    normal_fill(l.wk);
    normal_fill(l.wv);
    normal_fill(l.wo);
    ones(l.ln2_gamma);
    normal_fill(l.w1);
    normal_fill(l.w2);
  }
  ones(p.final_gamma);
  ones(p.head_gamma);
  normal_fill(p.head_weight);
  return p;
}

// --- forward -----------------------------------------------------------------

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& volumes,
                        const ModelConfig& config) {
  const Dims in = config.input_dims;
  const Dims pd = config.patch_dims;
  static const char* kAxis[3] = {"depth", "height", "width"};
  const std::size_t ext[3] = {in.depth, in.height, in.width};
  const std::size_t pext[3] = {pd.depth, pd.height, pd.width};
  for (int a = 0; a < 3; ++a) {
    if (pext[a] == 0 || ext[a] % pext[a] != 0) {
      throw ConfigError(std::string("patchify: ") + kAxis[a] + " " +
                        std::to_string(ext[a]) + " not divisible by patch " +
                        std::to_string(pext[a]));
    }
  }
  if (volumes.rank() != 4 || volumes.dim(1) != in.depth ||
      volumes.dim(2) != in.height || volumes.dim(3) != in.width) {
    throw DimensionError("patchify: expected [b x " + in.to_string() +
                         "], got " + shape_to_string(volumes.shape()));
  }
  const std::size_t b = volumes.dim(0);
  const Dims g = config.patch_grid();
  auto blocks = ops::reshape(volumes, {b, g.depth, pd.depth, g.height,
                                       pd.height, g.width, pd.width});
  auto ordered = ops::permute(blocks, {0, 1, 3, 5, 2, 4, 6});
  return ops::reshape(ordered, {b, g.count(), pd.count()});
}

template <typename T>
BasicTensor<T> embed(const BasicTensor<T>& patches,
                     const BasicModelParams<T>& params,
                     const ModelConfig& config) {
  const std::size_t n = config.num_patches();
  if (patches.rank() != 3 || patches.dim(1) != n ||
      patches.dim(2) != config.patch_volume()) {
    throw DimensionError("embed: expected [b x " + std::to_string(n) + " x " +
                         std::to_string(config.patch_volume()) + "], got " +
                         shape_to_string(patches.shape()));
  }
  const std::size_t b = patches.dim(0);
  auto projected = ops::add(ops::matmul_transposed(patches, params.patch_weight),
                            params.patch_bias);
  auto cls = ops::repeat_leading(params.class_token, b);
  auto sequence = ops::concat(cls, projected, 1);
  return ops::add(sequence, params.pos_embedding);
}

namespace {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias) {
  return ops::add(ops::matmul(x, w), bias);
}

template <typename T>
BasicTensor<T> maybe_dropout(const BasicTensor<T>& x, const ModelConfig& config,
                             Rng* rng) {
  if (rng == nullptr || config.dropout == 0.0) return x;
  return ops::dropout(x, config.dropout, *rng);
}

}  // namespace

template <typename T>
BasicTensor<T> encoder_layer(const BasicTensor<T>& x,
                             const EncoderLayerParams<T>& layer,
                             const ModelConfig& config, Rng* dropout_rng) {
  if (x.rank() != 3 || x.dim(2) != config.embed_dim) {
    throw DimensionError("encoder_layer: expected [b x n x " +
                         std::to_string(config.embed_dim) + "], got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t b = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t heads = config.num_heads;
  const std::size_t hd = config.head_dim;
  const T eps = static_cast<T>(config.layer_norm_eps);

  auto split_heads = [&](const BasicTensor<T>& t) {
    return ops::permute(ops::reshape(t, {b, n, heads, hd}), {0, 2, 1, 3});
  };

  auto h = ops::layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps);
  auto q = split_heads(linear(h, layer.wq, layer.bq));
  auto k = split_heads(linear(h, layer.wk, layer.bk));
  auto v = split_heads(linear(h, layer.wv, layer.bv));
  auto attended = ops::attention(q, k, v, T(1) / std::sqrt(static_cast<T>(hd)));
  auto merged = ops::reshape(ops::permute(attended, {0, 2, 1, 3}),
                             {b, n, config.embed_dim});
  auto attn_out = maybe_dropout(linear(merged, layer.wo, layer.bo), config,
                                dropout_rng);
  auto x1 = ops::add(x, attn_out);

  auto h2 = ops::layer_norm(x1, layer.ln2_gamma, layer.ln2_beta, eps);
  auto hidden = maybe_dropout(ops::gelu(linear(h2, layer.w1, layer.b1)), config,
                              dropout_rng);
  auto mlp_out = maybe_dropout(linear(hidden, layer.w2, layer.b2), config,
                               dropout_rng);
  return ops::add(x1, mlp_out);
}

template <typename T>
BasicTensor<T> forward_patches(const BasicTensor<T>& patches,
                               std::span<const float> ages,
                               const BasicModelParams<T>& params,
                               const ModelConfig& config, ForwardTrace* trace,
                               Rng* dropout_rng) {
  if (patches.rank() != 3 || ages.size() != patches.dim(0)) {
    throw DimensionError("forward: " + std::to_string(ages.size()) +
                         " ages for patch batch " +
                         shape_to_string(patches.shape()));
  }
  for (float a : ages) {
    if (!(a > 0.0f) || !std::isfinite(a)) {
      throw ConfigError("forward: age must be positive, got " +
                        std::to_string(a));
    }
  }
  if (params.layers.size() != config.num_layers) {
    throw DimensionError("forward: params hold " +
                         std::to_string(params.layers.size()) +
                         " layers, config expects " +
                         std::to_string(config.num_layers));
  }
  const std::size_t b = patches.dim(0);
  const T eps = static_cast<T>(config.layer_norm_eps);

  auto x = embed(patches, params, config);
  if (trace) {
    trace->patches = patches.shape();
    trace->sequence = x.shape();
  }
  for (const auto& layer : params.layers) {
    x = encoder_layer(x, layer, config, dropout_rng);
  }
  if (config.final_norm) {
    x = ops::layer_norm(x, params.final_gamma, params.final_beta, eps);
  }
  if (trace) trace->encoded = x.shape();

  auto cls = ops::reshape(ops::slice(x, 1, 0, 1), {b, config.embed_dim});
  std::vector<T> age_column(b);
  for (std::size_t i = 0; i < b; ++i) {
    age_column[i] = static_cast<T>(ages[i]) /
                    static_cast<T>(config.age_scale_divisor);
  }
  auto fused = ops::concat(cls, BasicTensor<T>({b, 1}, std::move(age_column)), 1);
  auto normed = ops::layer_norm(fused, params.head_gamma, params.head_beta, eps);
  auto logits = linear(normed, params.head_weight, params.head_bias);
  if (trace) {
    trace->class_feature = cls.shape();
    trace->fused = fused.shape();
    trace->logits = logits.shape();
  }
  return logits;
}

template <typename T>
BasicTensor<T> forward(const BasicTensor<T>& volumes,
                       std::span<const float> ages,
                       const BasicModelParams<T>& params,
                       const ModelConfig& config, ForwardTrace* trace,
                       Rng* dropout_rng) {
  return forward_patches(patchify(volumes, config), ages, params, config, trace,
                         dropout_rng);
}

template <typename T>
BasicTensor<T> volumes_to_tensor(std::span<const Volume* const> volumes,
                                 const ModelConfig& config) {
  const Dims d = config.input_dims;
  std::vector<T> data;
  data.reserve(volumes.size() * d.count());
  for (const Volume* v : volumes) {
    if (v->dims() != d || v->type() != VoxelType::kU8) {
      throw DimensionError("model input must be a u8 " + d.to_string() +
                           " volume, got " +
                           (v->type() == VoxelType::kU8 ? "u8 " : "f32 ") +
                           v->dims().to_string() +
                           "; run the preprocess command first");
    }
    for (std::uint8_t x : v->u8()) data.push_back(static_cast<T>(x) / T(255));
  }
  return BasicTensor<T>({volumes.size(), d.depth, d.height, d.width},
                        std::move(data));
}

#define OSVIT_INSTANTIATE_MODEL(T)                                             \
  template struct BasicModelParams<T>;                                         \
  template BasicTensor<T> patchify(const BasicTensor<T>&, const ModelConfig&); \
  template BasicTensor<T> embed(const BasicTensor<T>&,                         \
                                const BasicModelParams<T>&,                    \
                                const ModelConfig&);                           \
  template BasicTensor<T> encoder_layer(const BasicTensor<T>&,                 \
                                        const EncoderLayerParams<T>&,          \
                                        const ModelConfig&, Rng*);             \
  template BasicTensor<T> forward_patches(                                     \
      const BasicTensor<T>&, std::span<const float>,                           \
      const BasicModelParams<T>&, const ModelConfig&, ForwardTrace*, Rng*);    \
  template BasicTensor<T> forward(const BasicTensor<T>&,                       \
                                  std::span<const float>,                      \
                                  const BasicModelParams<T>&,                  \
                                  const ModelConfig&, ForwardTrace*, Rng*);    \
  template BasicTensor<T> volumes_to_tensor(std::span<const Volume* const>,    \
                                            const ModelConfig&);

OSVIT_INSTANTIATE_MODEL(float)
OSVIT_INSTANTIATE_MODEL(double)

template BasicModelParams<double> BasicModelParams<float>::cast<double>(
    const ModelConfig&) const;
template BasicModelParams<float> BasicModelParams<double>::cast<float>(
    const ModelConfig&) const;

#undef OSVIT_INSTANTIATE_MODEL

}  // namespace osvit
