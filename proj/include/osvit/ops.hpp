#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "osvit/rng.hpp"
#include "osvit/tensor.hpp"

// Differentiable tensor ops. Each op is a pure function of its inputs; when a
// tape is active on the calling thread and any input requires a gradient, the
// op registers itself for the backward pass.
//
// Broadcasting is limited to leading axes: a second operand whose shape is a
// suffix of the first operand's shape is repeated over the leading axes. Any
// other shape mismatch raises DimensionError.
namespace osvit::ops {

// Elementwise a + b; b may broadcast over a's leading axes.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise a * b (identical shapes).
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

// Sum / mean of all elements to a scalar (shape []).
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// a [..., m, k] · b [k, n] or [..., k, n] -> [..., m, n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// a [..., m, k] · bᵀ where b is [n, k] or [..., n, k] -> [..., m, n].
template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a,
                                 const BasicTensor<T>& b);

// Numerically stable softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

// Normalizes over the last axis with population variance.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps);

// Exact-erf GELU, x * Phi(x).
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      std::size_t axis);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// out.shape[i] = x.shape[axes[i]].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x,
                       const std::vector<std::size_t>& axes);

// x restricted to [start, start + length) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis,
                     std::size_t start, std::size_t length);

// Repeats x along a new leading axis of extent n.
template <typename T>
BasicTensor<T> repeat_leading(const BasicTensor<T>& x, std::size_t n);

// softmax(q kᵀ * scale) v over the last two axes of [..., n, d] inputs.
// Only the attention probabilities are kept for the backward pass.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, T scale);

// Inverted dropout; identity when p == 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng& rng);

inline constexpr std::int64_t kDefaultIgnoreIndex = -100;

// Mean negative log-likelihood over rows of `logits` [b, C] whose target is
// not ignore_index. Ignored rows contribute nothing to the sum or the count.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             std::span<const std::int64_t> targets,
                             std::int64_t ignore_index = kDefaultIgnoreIndex);

}  // namespace osvit::ops
