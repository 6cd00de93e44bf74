#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x00000100000001B3ull;
  }
  return h;
}

}  // namespace detail

// Counter-based generator: output i is mix64(seed + (i+1)*golden), so a
// stream is a pure function of (seed, counter) and independent streams come
// from distinct derived seeds, never from partitioning one stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return detail::mix64(seed_ + (++counter_) * detail::kGolden); }

  // Child stream keyed by a label; derivation mixes the label hash so sibling
  // streams never overlap regardless of draw counts on the parent.
  Rng fork(std::string_view label) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(detail::fnv1a64(label) + detail::kGolden)));
  }

  Rng fork(std::uint64_t salt) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(salt + detail::kGolden)));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_double(double lo, double hi) { return lo + (hi - lo) * uniform_double(); }

  // Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw ConfigError("uniform_below: n must be positive");
    while (true) {
      std::uint64_t x = next_u64();
      __uint128_t m = static_cast<__uint128_t>(x) * n;
      std::uint64_t lo = static_cast<std::uint64_t>(m);
      if (lo >= n || lo >= (0 - n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  // Box-Muller, always consuming exactly two draws. Computed in double so the
  // stream is bit-identical whether the caller stores f32 or f64.
  double normal_double() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

template <typename Scalar>
Tensor<Scalar> gaussian_sample(Rng& rng, Shape shape) {
  Tensor<Scalar> t = Tensor<Scalar>::empty(std::move(shape));
  Scalar* p = t.data();
  for (Index i = 0; i < t.numel(); ++i) p[i] = static_cast<Scalar>(rng.normal_double());
  return t;
}

template <typename Scalar>
Tensor<Scalar> uniform_sample(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<Scalar> t = Tensor<Scalar>::empty(std::move(shape));
  Scalar* p = t.data();
  for (Index i = 0; i < t.numel(); ++i) p[i] = static_cast<Scalar>(rng.uniform_double(lo, hi));
  return t;
}

}  // namespace ssmvdm
