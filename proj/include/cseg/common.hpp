#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Shape or rank incompatibility between tensors and operations.
struct ShapeError : Error {
  using Error::Error;
};
// NaN/Inf encountered or training diverged. CLI exit code 4.
struct NumericError : Error {
  using Error::Error;
};
// Gradient write into a frozen parameter store.
struct FrozenError : Error {
  using Error::Error;
};
// Bad or inconsistent configuration. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};
// Pipeline stage invoked before its prerequisites. CLI exit code 3.
struct StageOrderError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag));
}

// Deterministic RNG. Normal sampling goes through Box-Muller on mt19937
// uniforms so streams are bit-reproducible across standard libraries
// (std::normal_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(static_cast<std::uint32_t>(splitmix64(seed))) {}

  std::uint64_t seed() const { return seed_; }
  Rng fork(std::uint64_t tag) const { return Rng(mix_seed(seed_, tag)); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    // 53-bit mantissa from two draws
    std::uint64_t a = gen_();
    std::uint64_t b = gen_();
    double u = static_cast<double>(((a << 32) | b) >> 11) * (1.0 / 9007199254740992.0);
    return lo + (hi - lo) * u;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Uniform integer in [0, n)
  std::uint64_t index(std::uint64_t n) {
    // rejection-free modulo is fine here; n is tiny relative to 2^64
    std::uint64_t a = gen_();
    std::uint64_t b = gen_();
    return ((a << 32) | b) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cseg
