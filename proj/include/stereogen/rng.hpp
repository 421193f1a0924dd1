#pragma once

// Deterministic random source. mt19937 gives bit-portable integers; the
// normal sampler is an explicit Box-Muller over those bits so sequences do
// not depend on the standard library's distribution implementations.
// Seeds for sub-tasks are derived with an FNV-1a mix so training runs are
// resumable: every draw is keyed by (base seed, role tag, indices) instead
// of consuming a shared stream.

#include <cstdint>
#include <random>
#include <string_view>

#include "stereogen/tensor.hpp"

namespace sgen {

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64_u64(uint64_t v, uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = fnv1a64(tag);
  h = fnv1a64_u64(base, h);
  h = fnv1a64_u64(a, h);
  h = fnv1a64_u64(b, h);
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<std::mt19937::result_type>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1), 32 bits of resolution.
  double uniform() { return (static_cast<double>(next_u32()) + 0.5) * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at our ranges.
  int uniform_int(int n) { return static_cast<int>(next_u32() % static_cast<uint32_t>(n)); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Tensor normal_tensor(std::vector<int> shape, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = static_cast<float>(normal()) * stddev;
    return t;
  }

  Tensor uniform_tensor(std::vector<int> shape, float lo, float hi) {
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = static_cast<float>(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sgen
