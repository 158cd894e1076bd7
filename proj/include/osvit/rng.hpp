#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace osvit {

// Seeded generator with portable derived distributions.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard <random> distributions are implementation-defined,
// so uniform/normal/index draws are derived here from raw engine output to
// keep results identical across standard libraries.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound); unbiased by rejection.
  std::uint64_t below(std::uint64_t bound);

  // Standard normal via Box-Muller (both outputs used).
  double normal();

  // Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::span<T> items) {
    // Fisher-Yates, descending.
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace osvit
