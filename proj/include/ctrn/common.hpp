#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrn {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto its exit-code contract, so keep the
// hierarchy coarse: usage problems, data/format problems, numerical failures.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ValueError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic random source. std::mt19937_64 has a fully specified output
// sequence, but the standard <random> distributions do not, so the few
// distributions needed here are implemented directly on top of the raw
// 64-bit stream. Same seed, same values, on every platform.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derive an independent stream seed from a master seed and a salt.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(salt));
}

class RngEngine {
 public:
  explicit RngEngine(std::uint64_t seed) : state_(splitmix64(seed)) {
    // splitmix-seeded xorshift-free generator: we keep mt19937_64 for its
    // long period but seed it through splitmix to decorrelate small seeds.
    engine_.seed(state_);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ValueError("uniform_index: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % un;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return static_cast<std::size_t>(r % un);
  }

  // Standard normal via Box-Muller on the specified uniform stream.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
  std::mersenne_twister_engine<std::uint64_t, 64, 312, 156, 31,
                               0xb5026f5aa96619e9ULL, 29,
                               0x5555555555555555ULL, 17,
                               0x71d67fffeda60000ULL, 37,
                               0xfff7eee000000000ULL, 43,
                               6364136223846793005ULL>
      engine_;  // == std::mt19937_64, spelled out to pin the algorithm
};

template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, RngEngine& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace ctrn
