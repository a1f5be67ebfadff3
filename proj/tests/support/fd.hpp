#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lingm/tensor.hpp"

namespace testing_support {

/// Central-difference gradient of a scalar function of one tensor.
inline lingm::Tensor numeric_gradient(const std::function<double(const lingm::Tensor&)>& f, const lingm::Tensor& x,
                                      double h = 1e-5) {
  lingm::Tensor g(x.dims());
  lingm::Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// max |a - b| scaled by max |b|, so near-zero components do not dominate.
inline double max_rel_error(const lingm::Tensor& analytic, const lingm::Tensor& numeric) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / std::max(scale, 1e-300);
}

}  // namespace testing_support
