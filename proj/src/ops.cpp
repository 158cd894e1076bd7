#include "osvit/ops.hpp"

#include <cblas.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>

#include "osvit/error.hpp"
#include "osvit/runtime.hpp"

namespace osvit {

void set_compute_threads(int threads) {
  openblas_set_num_threads(std::max(1, threads));
}

int compute_threads() { return openblas_get_num_threads(); }

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace ops {
namespace {

template <typename T>
using Impl = detail::TensorImpl<T>;
template <typename T>
using ImplPtr = std::shared_ptr<Impl<T>>;

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, float alpha, const float* a, const float* b,
          float beta, float* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb,
              beta, c, static_cast<int>(n));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, double alpha, const double* a, const double* b,
          double beta, double* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb,
              beta, c, static_cast<int>(n));
}

template <typename T>
void check_finite(const BasicTensor<T>& t, const char* op) {
  constexpr T kMax = std::numeric_limits<T>::max();
  unsigned bad = 0;
  for (T v : t.data()) bad |= std::abs(v) <= kMax ? 0u : 1u;
  if (bad) {
    throw NumericError(std::string(op) + ": non-finite value in output " +
                       shape_to_string(t.shape()));
  }
}

template <typename T>
BasicTape<T>* recording_tape(
    std::initializer_list<const BasicTensor<T>*> inputs) {
  BasicTape<T>* tape = BasicTape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_to_string(a) +
         " and " + shape_to_string(b);
}

// Splits `shape` around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_to_string(shape));
  }
}

template <typename T>
BasicTensor<T> matmul_impl(const BasicTensor<T>& a, const BasicTensor<T>& b,
                           bool trans_b, const char* op) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError(two_shapes(op, a.shape(), b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t bk = trans_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::size_t n = trans_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (bk != k) throw DimensionError(two_shapes(op, a.shape(), b.shape()));

  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    if (lead_a != lead_b) {
      throw DimensionError(two_shapes(op, a.shape(), b.shape()));
    }
  }
  const std::size_t batches = a.numel() / std::max<std::size_t>(1, m * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  BasicTensor<T> out = BasicTensor<T>::zeros(out_shape);
  if (m * n * batches == 0) return out;

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  if (shared_b) {
    gemm(false, trans_b, batches * m, n, k, T(1), pa, pb, T(0), pc);
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      gemm(false, trans_b, m, n, k, T(1), pa + i * m * k, pb + i * k * n, T(0),
           pc + i * m * n);
    }
  }
  check_finite(out, op);

  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(
        {a.impl(), b.impl()}, out.impl(),
        [ai = a.impl(), bi = b.impl(), m, n, k, batches, shared_b,
         trans_b](Impl<T>& o) {
          const T* g = o.grad.data();
          const T* av = ai->data.data();
          const T* bv = bi->data.data();
          if (ai->requires_grad) {
            T* ga = ai->grad.data();
            // dA = dC · op(B)ᵀ
            if (shared_b) {
              gemm(false, !trans_b, batches * m, k, n, T(1), g, bv, T(1), ga);
            } else {
              for (std::size_t i = 0; i < batches; ++i) {
                gemm(false, !trans_b, m, k, n, T(1), g + i * m * n,
                     bv + i * k * n, T(1), ga + i * m * k);
              }
            }
          }
          if (bi->requires_grad) {
            T* gb = bi->grad.data();
            // dB = Aᵀ · dC, or dC ᵀ · A when B enters transposed.
            if (shared_b) {
              if (trans_b) {
                gemm(true, false, n, k, batches * m, T(1), g, av, T(1), gb);
              } else {
                gemm(true, false, k, n, batches * m, T(1), av, g, T(1), gb);
              }
            } else {
              for (std::size_t i = 0; i < batches; ++i) {
                if (trans_b) {
                  gemm(true, false, n, k, m, T(1), g + i * m * n,
                       av + i * m * k, T(1), gb + i * k * n);
                } else {
                  gemm(true, false, k, n, m, T(1), av + i * m * k,
                       g + i * m * n, T(1), gb + i * k * n);
                }
              }
            }
          }
        });
  }
  return out;
}

// Odometer walk over `out_shape`, yielding the source offset of every
// destination element in row-major order.
template <typename Fn>
void for_each_permuted(const Shape& out_shape,
                       const std::vector<std::size_t>& src_strides, Fn&& fn) {
  const std::size_t rank = out_shape.size();
  const std::size_t total = shape_numel(out_shape);
  if (total == 0) return;
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < total; ++dst) {
    fn(dst, src);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += src_strides[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= src_strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

// Single precision exp: Cody-Waite reduction and a degree-6 polynomial,
// within 2 ulp, written so loops over it vectorize.
inline float exp_fast(float x) {
  const float xc = std::min(std::max(x, -87.0f), 88.5f);
  // Biased so truncation rounds to nearest.
  const int n =
      static_cast<int>(xc * 1.44269504088896341f + 128.5f) - 128;
  const float fx = static_cast<float>(n);
  float r = xc - fx * 0.693359375f;
  r -= fx * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const float scale =
      std::bit_cast<float>(static_cast<std::uint32_t>(n + 127) << 23);
  return x < -87.0f ? 0.0f : y * scale;
}

// Single precision erf, absolute error below 2e-7.
inline float erf_fast(float x) {
  const float a = std::abs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * a);
  float p = 1.061405429f;
  p = p * t - 1.453152027f;
  p = p * t + 1.421413741f;
  p = p * t - 0.284496736f;
  p = p * t + 0.254829592f;
  const float y = 1.0f - p * t * exp_fast(-a * a);
  return std::copysign(y, x);
}

// Eight independent lanes so the reductions vectorize without reassociation
// flags.
template <typename T>
T row_max(const T* x, std::size_t n) {
  T lane[8];
  std::fill(lane, lane + 8, -std::numeric_limits<T>::infinity());
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lane[j] = std::max(lane[j], x[i + j]);
  }
  for (; i < n; ++i) lane[0] = std::max(lane[0], x[i]);
  return *std::max_element(lane, lane + 8);
}

template <typename T>
T row_sum(const T* x, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lane[j] += x[i + j];
  }
  for (; i < n; ++i) lane[0] += x[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

// dst[i] += src[i]
template <typename T>
void accumulate(T* dst, const T* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
T exp_t(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_fast(x);
  } else {
    return std::exp(x);
  }
}

template <typename T>
T erf_t(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return erf_fast(x);
  } else {
    return std::erf(x);
  }
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(two_shapes("add", a.shape(), b.shape()));
  }
  const std::size_t inner = b.numel();
  BasicTensor<T> out = a.clone();
  out.set_requires_grad(false);
  auto od = out.data();
  auto bd = b.data();
  if (inner > 0) {
    for (std::size_t o = 0; o < od.size(); o += inner) {
      T* row = od.data() + o;
      for (std::size_t j = 0; j < inner; ++j) row[j] += bd[j];
    }
  }
  check_finite(out, "add");
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record({a.impl(), b.impl()}, out.impl(),
                 [ai = a.impl(), bi = b.impl(), inner](Impl<T>& o) {
                   if (ai->requires_grad) {
                     accumulate(ai->grad.data(), o.grad.data(), o.grad.size());
                   }
                   if (bi->requires_grad && inner > 0) {
                     T* gb = bi->grad.data();
                     for (std::size_t r = 0; r < o.grad.size(); r += inner) {
                       const T* g = o.grad.data() + r;
                       for (std::size_t j = 0; j < inner; ++j) gb[j] += g[j];
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(two_shapes("mul", a.shape(), b.shape()));
  }
  BasicTensor<T> out = BasicTensor<T>::zeros(a.shape());
  auto od = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  check_finite(out, "mul");
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record({a.impl(), b.impl()}, out.impl(),
                 [ai = a.impl(), bi = b.impl()](Impl<T>& o) {
                   const std::size_t n = o.grad.size();
                   const T* g = o.grad.data();
                   if (ai->requires_grad) {
                     T* ga = ai->grad.data();
                     const T* bv = bi->data.data();
                     for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
                   }
                   if (bi->requires_grad) {
                     T* gb = bi->grad.data();
                     const T* av = ai->data.data();
                     for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                   }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  BasicTensor<T> out = x.detach();
  for (T& v : out.data()) v *= factor;
  check_finite(out, "scale");
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl(), factor](Impl<T>& o) {
      T* gx = xi->grad.data();
      const T* g = o.grad.data();
      const std::size_t n = o.grad.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  BasicTensor<T> out = BasicTensor<T>::scalar(total);
  check_finite(out, "sum");
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl()](Impl<T>& o) {
      const T g = o.grad[0];
      for (T& v : xi->grad) v += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl(a, b, false, "matmul");
}

template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a,
                                 const BasicTensor<T>& b) {
  return matmul_impl(a, b, true, "matmul_transposed");
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  require_axis("softmax", x.shape(), axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  for (T v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN in input");
  }
  BasicTensor<T> out = BasicTensor<T>::zeros(x.shape());
  const T* in = x.data().data();
  T* y = out.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j)
        peak = std::max(peak, in[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = exp_t(in[base + j * s.inner] - peak);
        y[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) y[base + j * s.inner] /= total;
    }
  }
  check_finite(out, "softmax");
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl(), s](Impl<T>& o) {
      const T* yv = o.data.data();
      const T* g = o.grad.data();
      T* gx = xi->grad.data();
      for (std::size_t oo = 0; oo < s.outer; ++oo) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = oo * s.extent * s.inner + i;
          T dot = 0;
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t p = base + j * s.inner;
            dot += g[p] * yv[p];
          }
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t p = base + j * s.inner;
            gx[p] += yv[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma " +
                         shape_to_string(gamma.shape()) + " / beta " +
                         shape_to_string(beta.shape()) +
                         " must match last axis of " +
                         shape_to_string(x.shape()));
  }
  if (!(eps >= T(0))) throw ConfigError("layer_norm: eps must be >= 0");
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;

  BasicTensor<T> out = BasicTensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const T* in = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  T* y = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * n + j] = h;
      y[r * n + j] = h * gv[j] + bv[j];
    }
  }
  check_finite(out, "layer_norm");
  if (auto* tape = recording_tape({&x, &gamma, &beta})) {
    tape->record(
        {x.impl(), gamma.impl(), beta.impl()}, out.impl(),
        [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(),
         xhat = std::move(xhat), rstd = std::move(rstd), n,
         rows](Impl<T>& o) {
          const T* g = o.grad.data();
          const T* gam = gi->data.data();
          std::vector<T> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g + r * n;
            const T* hr = xhat.data() + r * n;
            if (gi->requires_grad) {
              for (std::size_t j = 0; j < n; ++j) gi->grad[j] += gr[j] * hr[j];
            }
            if (bi->requires_grad) {
              for (std::size_t j = 0; j < n; ++j) bi->grad[j] += gr[j];
            }
            if (xi->requires_grad) {
              T mean_d = 0;
              T mean_dh = 0;
              for (std::size_t j = 0; j < n; ++j) {
                dxhat[j] = gr[j] * gam[j];
                mean_d += dxhat[j];
                mean_dh += dxhat[j] * hr[j];
              }
              mean_d /= static_cast<T>(n);
              mean_dh /= static_cast<T>(n);
              T* gx = xi->grad.data() + r * n;
              for (std::size_t j = 0; j < n; ++j) {
                gx[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
              }
            }
          }
        });
  }
  return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  BasicTensor<T> out = BasicTensor<T>::zeros(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    od[i] = T(0.5) * xd[i] * (T(1) + erf_t(xd[i] * inv_sqrt2));
  }
  check_finite(out, "gelu");
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl(), inv_sqrt2](Impl<T>& o) {
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      const T* xv = xi->data.data();
      const T* g = o.grad.data();
      T* gx = xi->grad.data();
      const std::size_t n = o.grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + erf_t(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * exp_t(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      std::size_t axis) {
  require_axis("concat", a.shape(), axis);
  if (a.rank() != b.rank()) {
    throw DimensionError(two_shapes("concat", a.shape(), b.shape()));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw DimensionError(two_shapes("concat", a.shape(), b.shape()));
    }
  }
  const AxisSplit sa = split_axis(a.shape(), axis);
  const std::size_t ea = sa.extent * sa.inner;
  const std::size_t eb = b.dim(axis) * sa.inner;
  Shape out_shape = a.shape();
  out_shape[axis] += b.dim(axis);
  BasicTensor<T> out = BasicTensor<T>::zeros(out_shape);
  T* y = out.data().data();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(pa + o * ea, ea, y + o * (ea + eb));
    std::copy_n(pb + o * eb, eb, y + o * (ea + eb) + ea);
  }
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record({a.impl(), b.impl()}, out.impl(),
                 [ai = a.impl(), bi = b.impl(), outer = sa.outer, ea,
                  eb](Impl<T>& o) {
                   const T* g = o.grad.data();
                   for (std::size_t r = 0; r < outer; ++r) {
                     if (ai->requires_grad) {
                       accumulate(ai->grad.data() + r * ea, g + r * (ea + eb), ea);
                     }
                     if (bi->requires_grad) {
                       accumulate(bi->grad.data() + r * eb,
                                  g + r * (ea + eb) + ea, eb);
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) +
                         " as " + shape_to_string(shape));
  }
  BasicTensor<T> out(std::move(shape),
                     std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl()](Impl<T>& o) {
      accumulate(xi->grad.data(), o.grad.data(), o.grad.size());
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x,
                       const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (axes.size() != rank) {
    throw DimensionError("permute: axis list size does not match rank of " +
                         shape_to_string(x.shape()));
  }
  for (std::size_t ax : axes) {
    if (ax >= rank || seen[ax]) {
      throw DimensionError("permute: invalid axis permutation for " +
                           shape_to_string(x.shape()));
    }
    seen[ax] = true;
  }
  const auto strides = row_major_strides(x.shape());
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(axes[i]);
    src_strides[i] = strides[axes[i]];
  }
  BasicTensor<T> out = BasicTensor<T>::zeros(out_shape);
  const T* src = x.data().data();
  T* dst = out.data().data();
  for_each_permuted(out_shape, src_strides,
                    [&](std::size_t d, std::size_t s) { dst[d] = src[s]; });
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(),
                 [xi = x.impl(), out_shape, src_strides](Impl<T>& o) {
                   T* gx = xi->grad.data();
                   const T* g = o.grad.data();
                   for_each_permuted(out_shape, src_strides,
                                     [&](std::size_t d, std::size_t s) {
                                       gx[s] += g[d];
                                     });
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis,
                     std::size_t start, std::size_t length) {
  require_axis("slice", x.shape(), axis);
  if (start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) +
                         ") exceeds axis " + std::to_string(axis) + " of " +
                         shape_to_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  BasicTensor<T> out = BasicTensor<T>::zeros(out_shape);
  const std::size_t src_row = s.extent * s.inner;
  const std::size_t dst_row = length * s.inner;
  const std::size_t first = start * s.inner;
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src + o * src_row + first, dst_row, dst + o * dst_row);
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(),
                 [xi = x.impl(), outer = s.outer, src_row, dst_row,
                  first](Impl<T>& o) {
                   for (std::size_t r = 0; r < outer; ++r) {
                     accumulate(xi->grad.data() + r * src_row + first,
                                o.grad.data() + r * dst_row, dst_row);
                   }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> repeat_leading(const BasicTensor<T>& x, std::size_t n) {
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  BasicTensor<T> out = BasicTensor<T>::zeros(out_shape);
  const std::size_t inner = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(x.data().begin(), x.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * inner));
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(), [xi = x.impl(), inner](Impl<T>& o) {
      for (std::size_t r = 0; r < o.grad.size(); r += inner) {
        accumulate(xi->grad.data(), o.grad.data() + r, inner);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, T scale) {
  if (q.rank() < 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) +
                         ", k " + shape_to_string(k.shape()) + ", v " +
                         shape_to_string(v.shape()) +
                         " must share one [..., n, d] shape");
  }
  const std::size_t n = q.dim(q.rank() - 2);
  const std::size_t d = q.dim(q.rank() - 1);
  const std::size_t batches = n * d == 0 ? 0 : q.numel() / (n * d);

  BasicTensor<T> out = BasicTensor<T>::zeros(q.shape());
  // Probabilities are rebuilt per head in backward from these row stats.
  std::vector<T> peaks(batches * n);
  std::vector<T> inv_totals(batches * n);
  std::vector<T> p(n * n);
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  T* po = out.data().data();
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t off = b * n * d;
    gemm(false, true, n, n, d, scale, pq + off, pk + off, T(0), p.data());
    for (std::size_t r = 0; r < n; ++r) {
      T* row = p.data() + r * n;
      if (std::isnan(row[0])) throw NumericError("attention: NaN scores");
      const T peak = row_max(row, n);
      for (std::size_t c = 0; c < n; ++c) row[c] = exp_t(row[c] - peak);
      const T inv = T(1) / row_sum(row, n);
      for (std::size_t c = 0; c < n; ++c) row[c] *= inv;
      peaks[b * n + r] = peak;
      inv_totals[b * n + r] = inv;
    }
    gemm(false, false, n, d, n, T(1), p.data(), pv + off, T(0), po + off);
  }
  check_finite(out, "attention");

  if (auto* tape = recording_tape({&q, &k, &v})) {
    tape->record(
        {q.impl(), k.impl(), v.impl()}, out.impl(),
        [qi = q.impl(), ki = k.impl(), vi = v.impl(),
         peaks = std::move(peaks), inv_totals = std::move(inv_totals), n, d,
         batches, scale](Impl<T>& o) {
          std::vector<T> p(n * n);
          std::vector<T> dp(n * n);
          std::vector<T> tmp(n);
          for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t off = b * n * d;
            const T* qv = qi->data.data() + off;
            const T* kv = ki->data.data() + off;
            gemm(false, true, n, n, d, scale, qv, kv, T(0), p.data());
            for (std::size_t r = 0; r < n; ++r) {
              T* row = p.data() + r * n;
              const T peak = peaks[b * n + r];
              const T inv = inv_totals[b * n + r];
              for (std::size_t c = 0; c < n; ++c) row[c] = exp_t(row[c] - peak);
              for (std::size_t c = 0; c < n; ++c) row[c] *= inv;
            }
            const T* g = o.grad.data() + off;
            // dP = dO · Vᵀ
            gemm(false, true, n, n, d, T(1), g, vi->data.data() + off, T(0),
                 dp.data());
            if (vi->requires_grad) {
              gemm(true, false, n, d, n, T(1), p.data(), g, T(1),
                   vi->grad.data() + off);
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (std::size_t r = 0; r < n; ++r) {
              T* dr = dp.data() + r * n;
              const T* pr = p.data() + r * n;
              for (std::size_t c = 0; c < n; ++c) tmp[c] = dr[c] * pr[c];
              const T dot = row_sum(tmp.data(), n);
              for (std::size_t c = 0; c < n; ++c) dr[c] = pr[c] * (dr[c] - dot);
            }
            if (qi->requires_grad) {
              gemm(false, false, n, d, n, scale, dp.data(), kv, T(1),
                   qi->grad.data() + off);
            }
            if (ki->requires_grad) {
              gemm(true, false, n, d, n, scale, dp.data(), qv, T(1),
                   ki->grad.data() + off);
            }
          }
        });
  }
  return out;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1)");
  }
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (T& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  BasicTensor<T> out = BasicTensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    out.data()[i] = x.data()[i] * mask[i];
  if (auto* tape = recording_tape({&x})) {
    tape->record({x.impl()}, out.impl(),
                 [xi = x.impl(), mask = std::move(mask)](Impl<T>& o) {
                   T* gx = xi->grad.data();
                   const T* g = o.grad.data();
                   const T* m = mask.data();
                   const std::size_t n = mask.size();
                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * m[i];
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             std::span<const std::int64_t> targets,
                             std::int64_t ignore_index) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " +
                         shape_to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  std::size_t counted = 0;
  for (std::int64_t t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw UsageError("cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
    ++counted;
  }
  if (counted == 0) {
    throw UsageError("cross_entropy: every row is ignored, mean undefined");
  }

  // Softmax rows are kept for the gradient: (p - onehot) / counted.
  std::vector<T> probs(rows * classes, T(0));
  const T* x = logits.data().data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const T* row = x + r * classes;
    const T peak = *std::max_element(row, row + classes);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - peak);
    const T lse = peak + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t c = 0; c < classes; ++c)
      probs[r * classes + c] = std::exp(row[c] - lse);
  }
  BasicTensor<T> out = BasicTensor<T>::scalar(total / static_cast<T>(counted));
  check_finite(out, "cross_entropy");
  if (auto* tape = recording_tape({&logits})) {
    std::vector<std::int64_t> tgt(targets.begin(), targets.end());
    tape->record({logits.impl()}, out.impl(),
                 [li = logits.impl(), probs = std::move(probs),
                  tgt = std::move(tgt), classes, counted,
                  ignore_index](Impl<T>& o) {
                   const T g = o.grad[0] / static_cast<T>(counted);
                   for (std::size_t r = 0; r < tgt.size(); ++r) {
                     if (tgt[r] == ignore_index) continue;
                     for (std::size_t c = 0; c < classes; ++c) {
                       T d = probs[r * classes + c];
                       if (static_cast<std::int64_t>(c) == tgt[r]) d -= T(1);
                       li->grad[r * classes + c] += g * d;
                     }
                   }
                 });
  }
  return out;
}

#define OSVIT_INSTANTIATE_OPS(T)                                              \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                    \
  template BasicTensor<T> sum(const BasicTensor<T>&);                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                        \
  template BasicTensor<T> matmul(const BasicTensor<T>&,                       \
                                 const BasicTensor<T>&);                      \
  template BasicTensor<T> matmul_transposed(const BasicTensor<T>&,            \
                                            const BasicTensor<T>&);           \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);        \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&,                   \
                                     const BasicTensor<T>&,                   \
                                     const BasicTensor<T>&, T);               \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                        \
  template BasicTensor<T> concat(const BasicTensor<T>&, const BasicTensor<T>&, \
                                 std::size_t);                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);              \
  template BasicTensor<T> permute(const BasicTensor<T>&,                      \
                                  const std::vector<std::size_t>&);           \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t,           \
                                std::size_t, std::size_t);                    \
  template BasicTensor<T> repeat_leading(const BasicTensor<T>&, std::size_t); \
  template BasicTensor<T> attention(const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&, T);                \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&);       \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&,                \
                                        std::span<const std::int64_t>,        \
                                        std::int64_t);

OSVIT_INSTANTIATE_OPS(float)
OSVIT_INSTANTIATE_OPS(double)

#undef OSVIT_INSTANTIATE_OPS

}  // namespace ops
}  // namespace osvit
