#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cutkit/error.hpp"

namespace cutkit::rng {

// splitmix64 step. Used to derive independent stream seeds from a base seed so
// that (base_seed, purpose, iteration) always names the same stream.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive(uint64_t base, uint64_t stream) {
  return splitmix64(splitmix64(base) ^ 0x632be59bd9b4e019ULL ^ stream);
}

inline uint64_t derive(uint64_t base, uint64_t stream, uint64_t substream) {
  return derive(derive(base, stream), substream);
}

inline std::mt19937_64 engine(uint64_t seed) { return std::mt19937_64(seed); }

// Uniform double in [0, 1). Hand-rolled from raw engine output because
// std::uniform_real_distribution is implementation-defined and results must
// reproduce across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n). Rejection-free modulo is fine here: n is always
// tiny relative to 2^64, and determinism matters more than the 2^-50 bias.
inline uint64_t below(std::mt19937_64& rng, uint64_t n) {
  if (n == 0) throw RuntimeError("rng::below: n must be positive");
  return rng() % n;
}

// Fisher-Yates shuffle with the hand-rolled index draw, for the same
// cross-platform determinism reason as uniform01.
template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  if (v.size() < 2) return;
  for (size_t i = v.size() - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(below(rng, i + 1));
    std::swap(v[i], v[j]);
  }
}

// Sample an index proportional to non-negative weights via CDF scan.
inline size_t sample_index(std::span<const double> weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw RuntimeError("rng::sample_index: weights sum to zero");
  double u = uniform01(rng) * total;
  double acc = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace cutkit::rng
