#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "lingm/tensor.hpp"

namespace lingm {

/// Numerically stable softmax of one logit vector, written into `out`.
inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] - mx);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
}

inline Tensor softmax(const Tensor& logits) {
  if (logits.empty()) throw ShapeError("softmax: empty input");
  require_finite(logits, "softmax");
  Tensor out(Dims{logits.size()});
  softmax_into(logits.data(), out.data());
  return out;
}

/// log(sum(exp(x))) with max subtraction.
inline double log_sum_exp(std::span<const double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

/// Mean over rows of -log softmax(logits_i)[label_i]; logits is [N, c].
inline double cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, c]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  require_finite(logits, "cross_entropy");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw InvalidArgument("cross_entropy: label out of range");
    auto row = logits.row(i);
    total += log_sum_exp(row) - row[labels[i]];
  }
  return total / static_cast<double>(n);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Index of the maximum; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = j;
  return best;
}

}  // namespace lingm
