#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace handrec {

// mt19937_64 output is fully specified by the standard; only the distribution
// adapters are implementation-defined. Scaling raw draws ourselves keeps every
// sampled value reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t raw() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a, used to derive per-tensor init streams from (seed, name) so weight
// initialization does not depend on creation order.
inline std::uint64_t hash_name(const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline Rng named_rng(std::uint64_t seed, const std::string& name) {
  return Rng(seed ^ hash_name(name));
}

}  // namespace handrec
