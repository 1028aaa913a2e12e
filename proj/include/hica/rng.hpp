#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace hica {

// Stateless 64-bit mixer (splitmix64 finalizer). All keyed determinism in the
// project funnels through this: pseudo-encoder rows, planted label rules,
// split hashing.
inline uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Order-sensitive key builder: mixes one ingredient into a running key.
inline uint64_t key_mix(uint64_t key, uint64_t v) {
  return mix64(key + 0x9e3779b97f4a7c15ull + v);
}
inline uint64_t key_mix(uint64_t key, std::string_view s) {
  return key_mix(key, fnv1a64(s));
}

// Deterministic stream RNG (splitmix64 sequence). Not std::* distributions:
// results must be identical across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller, cosine branch only; two uniforms per draw.
  double gauss() {
    const double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) {
    return n <= 1 ? 0 : next_u64() % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

// One gaussian value pinned to a key; independent of evaluation order.
inline double keyed_gauss(uint64_t key) {
  const uint64_t a = mix64(key ^ 0xd1b54a32d192ed03ull);
  const uint64_t b = mix64(key ^ 0x8cb92ba72f3d8dd7ull);
  const double u1 = 1.0 - static_cast<double>(a >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace hica
