#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

#include "lingm/tensor.hpp"

namespace lingm {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;

  static AdamState fresh(const Dims& dims, AdamHyper hyper = {}) {
    return AdamState{hyper, Tensor(dims), Tensor(dims), 0};
  }
};

/// In-place Adam update with bias correction. `lr` overrides the stored
/// learning rate (used by schedules); pass a negative value to keep it.
inline void adam_update(AdamState& state, Tensor& param, const Tensor& grad, double lr = -1.0) {
  param.require_same_shape(grad, "adam_step");
  state.m.require_same_shape(param, "adam_step (first moment)");
  state.v.require_same_shape(param, "adam_step (second moment)");
  require_finite(param, "adam_step param");
  require_finite(grad, "adam_step grad");
  const AdamHyper& h = state.hyper;
  if (lr < 0) lr = h.lr;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  auto m = state.m.data();
  auto v = state.v.data();
  auto p = param.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

inline std::pair<AdamState, Tensor> adam_step(AdamState state, Tensor param, const Tensor& grad) {
  adam_update(state, param, grad);
  return {std::move(state), std::move(param)};
}

/// Cosine decay from base_lr at step 0 to 0 at step total.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total) {
  if (total == 0) return base_lr;
  const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace lingm
