#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>

#include "scenemixer/rng.hpp"
#include "scenemixer/tensor.hpp"

namespace scenemixer::testing {

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Largest |a - b| / max(|a|, |b|, floor) over all elements. The floor keeps
/// coordinates whose true gradient is ~0 from dividing noise by noise.
inline double max_rel_error(const Tensor64& a, const Tensor64& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double weighted_sum(const Tensor64& y, const Tensor64& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace scenemixer::testing
