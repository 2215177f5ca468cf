#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "dkbo/errors.hpp"

namespace dkbo {

// splitmix64; used both as a generator step and to derive independent streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// xoshiro256** with fully specified helpers on top, so that sampling is
// bit-reproducible across standard libraries (std::*_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0, by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::uniform_index: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller (one value per call; cache the pair).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // k distinct indices from [0, n), Fisher-Yates over a scratch vector.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k > n) throw ContractError("sample_without_replacement: k > n");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_index(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Independent stream derived from (seed, tag, indices...). Used to give each
// episode/task/step its own generator so results are independent of the order
// or parallelism of execution.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag, std::uint64_t a = 0,
                      std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t st = seed ^ fnv1a(tag);
  splitmix64(st);
  st ^= 0x9e3779b97f4a7c15ULL * (a + 1);
  splitmix64(st);
  st ^= 0xc2b2ae3d27d4eb4fULL * (b + 1);
  splitmix64(st);
  st ^= 0x165667b19e3779f9ULL * (c + 1);
  return Rng(splitmix64(st));
}

}  // namespace dkbo
