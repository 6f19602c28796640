#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace fskt {

// Deterministic random stream. The engine and the seed_seq expansion are
// fully specified by the standard, and the floating-point transforms below
// are written out explicitly, so a stream is reproducible across standard
// libraries (up to libm rounding in log/cos).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream for one purpose ("init", "sampling", "noise", ...)
  // derived from a master seed. Toggling how one stream is consumed never
  // perturbs another.
  Rng(std::uint64_t master_seed, std::string_view purpose);

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable 64-bit FNV-1a hash, used to turn purpose labels into seeds.
std::uint64_t stable_hash(std::string_view text);

}  // namespace fskt
