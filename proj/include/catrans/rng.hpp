#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace catrans {

// SplitMix64 step; the whole project draws randomness through this so runs
// are reproducible bit for bit regardless of platform stdlib.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (0x9E3779B97F4A7C15ull + b + (a << 12) + (a >> 3));
  return splitmix64(s);
}

// Named sub-stream derivation: all randomness flows from one root seed
// through (name, index) keys, e.g. ("data", step) or ("init", 0).
inline uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t index = 0) {
  return mix_u64(mix_u64(root, fnv1a64(stream)), index);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) { splitmix64(state_); }

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace catrans
