#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace msic {

// Seedable generator that can be split into independent named streams.
//
// Uniform and normal draws are derived from the raw 64-bit engine output
// with fixed arithmetic, so a seed reproduces the same values on any
// standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  // Child stream keyed by a label; the parent state is not advanced.
  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const;

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Inclusive range [lo, hi].
  int uniform_int(int lo, int hi);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ull);

}  // namespace msic
