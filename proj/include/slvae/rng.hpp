#pragma once

// Random streams. Every stochastic step draws from an Rng that was derived
// from a master seed through a named sub-seed, so any stage can be replayed
// on its own. Distribution transforms are written out here (rather than
// std::*_distribution) so streams are identical across standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace slvae {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Sub-seed for a named stage, e.g. derive_seed(master, "dataset").
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return splitmix64(master ^ splitmix64(h));
}

/// Sub-seed for the index-th item of a stage (trial, Monte-Carlo run, ...).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t index) {
  return splitmix64(derive_seed(master, stage) + splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

/// Standard normal via Box-Muller (one draw per call; the pair's twin is discarded).
inline double standard_normal(Rng& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace slvae
