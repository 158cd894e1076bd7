#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "osvit/model.hpp"
#include "osvit/rng.hpp"
#include "osvit/tensor.hpp"

namespace osvit::testing {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::vector<T> data(shape_numel(shape));
  for (auto& x : data) x = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

// Small network with the same structure as the default one.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.input_dims = {10, 16, 16};
  c.patch_dims = {5, 8, 8};
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_dim = 8;
  c.mlp_dim = 32;
  return c;
}

// Pointers to every parameter tensor, in named() order.
template <typename T>
std::vector<BasicTensor<T>*> param_slots(BasicModelParams<T>& p,
                                         const ModelConfig& config) {
  std::vector<BasicTensor<T>*> s{&p.patch_weight, &p.patch_bias,
                                 &p.class_token, &p.pos_embedding};
  for (auto& l : p.layers) {
    for (auto* t : {&l.ln1_gamma, &l.ln1_beta, &l.wq, &l.bq, &l.wk, &l.bk,
                    &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_gamma, &l.ln2_beta,
                    &l.w1, &l.b1, &l.w2, &l.b2}) {
      s.push_back(t);
    }
  }
  if (config.final_norm) {
    s.push_back(&p.final_gamma);
    s.push_back(&p.final_beta);
  }
  for (auto* t : {&p.head_gamma, &p.head_beta, &p.head_weight, &p.head_bias}) {
    s.push_back(t);
  }
  return s;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("osvit_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace osvit::testing
