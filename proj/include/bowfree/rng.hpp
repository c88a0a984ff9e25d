#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bowfree/matrix.hpp"

namespace bowfree {

// Deterministic random source. All draws are hand-rolled on top of the
// mt19937_64 stream so results do not depend on the standard library's
// distribution implementations; identical seeds give identical streams on
// every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  uint64_t seed() const { return seed_; }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without caching; two uniforms per draw keeps the stream
  // position a pure function of the draw count.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -std::log(-std::log(u));
  }

  // [0, n)
  uint64_t integer(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(gen_()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[integer(i)]);
  }

  // Independent substream, a pure function of (seed, stream); safe for
  // parallel jobs regardless of the parent's draw position.
  Rng split(uint64_t stream) const { return Rng(mix(seed_, stream)); }

  void fill_normal(Matrix& m, double std_dev = 1.0) {
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = normal() * std_dev;
  }

  void fill_uniform(Matrix& m, double lo, double hi) {
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
  }

  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the pair
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace bowfree
