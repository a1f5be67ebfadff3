#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lingm/error.hpp"

namespace lingm {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, double fill = 0.0) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(dims_product(dims_), fill);
  }

  Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != dims_product(dims_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_string(dims_));
  }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }

  /// Row i of a tensor viewed as [dims[0], rest].
  std::span<double> row(std::size_t i) {
    const std::size_t w = data_.size() / dims_[0];
    return std::span<double>(data_).subspan(i * w, w);
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t w = data_.size() / dims_[0];
    return std::span<const double>(data_).subspan(i * w, w);
  }

  Tensor reshaped(Dims dims) const { return Tensor(std::move(dims), data_); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (dims_ != o.dims_)
      throw ShapeError(std::string(what) + ": shape " + dims_string(dims_) + " vs " +
                       dims_string(o.dims_));
  }

  bool operator==(const Tensor& o) const = default;

 private:
  void check_dims() const {
    for (std::size_t d : dims_)
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_string(dims_));
  }

  Dims dims_;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) throw NonFiniteError(std::string(what) + ": non-finite value");
}

inline void require_finite(const Tensor& t, const char* what) { require_finite(t.data(), what); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack: no items");
  Dims dims{items.size()};
  for (std::size_t d : items[0].dims()) dims.push_back(d);
  std::vector<double> data;
  data.reserve(dims_product(dims));
  for (const Tensor& t : items) {
    t.require_same_shape(items[0], "stack");
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(dims), std::move(data));
}

/// Inverse of stack: slice i of the leading axis.
inline Tensor unstack_item(const Tensor& batch, std::size_t i) {
  Dims dims(batch.dims().begin() + 1, batch.dims().end());
  if (dims.empty()) dims.push_back(1);
  auto r = batch.row(i);
  return Tensor(std::move(dims), std::vector<double>(r.begin(), r.end()));
}

}  // namespace lingm
