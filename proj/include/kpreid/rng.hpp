#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace kpr {

// Deterministic PRNG with a single 64-bit state word so the full state fits
// in the checkpoint trailer. splitmix64 core; distributions are hand-rolled
// because std:: distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform index in [0, n); n must be positive.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  // Box-Muller; the second variate is discarded so the state stays one word.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Standard ViT init: normal rejected outside two standard deviations.
  double truncated_normal(double stddev) {
    double v;
    do {
      v = normal();
    } while (std::abs(v) > 2.0);
    return v * stddev;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace kpr
