#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fskt/rng.hpp"
#include "fskt/tensor.hpp"

namespace testing {

inline std::vector<double> random_values(fskt::Rng& rng, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline fskt::Tensor random_matrix(fskt::Rng& rng, std::size_t r, std::size_t c,
                                  bool grad = true, double lo = -1.0, double hi = 1.0) {
  return fskt::Tensor::matrix(r, c, random_values(rng, r * c, lo, hi), grad);
}

// Values bounded away from zero, for kinks at the origin.
inline std::vector<double> away_from_zero(fskt::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) {
    const double m = rng.uniform(0.05, 1.0);
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return v;
}

inline std::string source_path(const std::string& rel) { return std::string(FSKT_SOURCE_DIR) + "/" + rel; }

}  // namespace testing
