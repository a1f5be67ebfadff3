#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lingm/ndt.hpp"
#include "lingm/rng.hpp"

namespace lingm {

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw InvalidArgument("unknown activation '" + s + "'");
}

namespace detail {

inline double activate(Activation a, double x) { return a == Activation::Tanh ? std::tanh(x) : (x > 0 ? x : 0.0); }

/// Derivative expressed through the activation output.
inline double activate_grad(Activation a, double y) {
  return a == Activation::Tanh ? 1.0 - y * y : (y > 0 ? 1.0 : 0.0);
}

}  // namespace detail

/// Frozen differentiable feature extractor. forward maps a batch
/// [N, input_shape...] to [N, feature_dim]; vjp returns the gradient w.r.t.
/// the input batch only.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual std::string architecture() const = 0;
  virtual Dims input_shape() const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual Tensor forward(const Tensor& batch) const = 0;
  virtual Tensor vjp(const Tensor& batch, const Tensor& upstream) const = 0;

  /// Named parameter tensors, in manifest order.
  virtual std::vector<std::pair<std::string, const Tensor*>> parameters() const = 0;
  virtual Activation activation() const { return Activation::Tanh; }

  std::size_t input_size() const { return dims_product(input_shape()); }

 protected:
  std::size_t check_batch(const Tensor& batch) const {
    Dims want = input_shape();
    Dims got(batch.dims().begin() + (batch.rank() ? 1 : 0), batch.dims().end());
    if (batch.rank() == 0 || got != want)
      throw ShapeError(architecture() + " encoder: expected [N]" + dims_string(want) + " batch, got " +
                       dims_string(batch.dims()));
    require_finite(batch, "encoder input");
    return batch.dim(0);
  }

  void check_upstream(const Tensor& upstream, std::size_t n) const {
    if (upstream.rank() != 2 || upstream.dim(0) != n || upstream.dim(1) != feature_dim())
      throw ShapeError(architecture() + " encoder vjp: upstream must be [N, f], got " + dims_string(upstream.dims()));
    require_finite(upstream, "encoder upstream");
  }
};

/// phi(x) = x on vectors of length d.
class IdentityEncoder final : public Encoder {
 public:
  explicit IdentityEncoder(std::size_t dim) : dim_(dim) {}
  std::string architecture() const override { return "identity"; }
  Dims input_shape() const override { return {dim_}; }
  std::size_t feature_dim() const override { return dim_; }
  Tensor forward(const Tensor& batch) const override {
    check_batch(batch);
    return batch;
  }
  Tensor vjp(const Tensor& batch, const Tensor& upstream) const override {
    check_upstream(upstream, check_batch(batch));
    return upstream;
  }
  std::vector<std::pair<std::string, const Tensor*>> parameters() const override { return {}; }

 private:
  std::size_t dim_;
};

/// phi(x) = P vec(x) with P [f, d], entries N(0, 1) / sqrt(d).
class RandomProjectionEncoder final : public Encoder {
 public:
  RandomProjectionEncoder(Dims input_shape, Tensor projection) : input_(std::move(input_shape)), proj_(std::move(projection)) {
    if (proj_.rank() != 2 || proj_.dim(1) != dims_product(input_)) throw ShapeError("random_projection: matrix must be [f, d]");
  }

  static RandomProjectionEncoder random(Dims input_shape, std::size_t f, RngStream& rng) {
    const std::size_t d = dims_product(input_shape);
    Tensor p(Dims{f, d});
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : p.data()) v = rng.normal() * s;
    return RandomProjectionEncoder(std::move(input_shape), std::move(p));
  }

  std::string architecture() const override { return "random_projection"; }
  Dims input_shape() const override { return input_; }
  std::size_t feature_dim() const override { return proj_.dim(0); }
  const Tensor& matrix() const { return proj_; }

  Tensor forward(const Tensor& batch) const override {
    const std::size_t n = check_batch(batch), f = proj_.dim(0);
    Tensor out(Dims{n, f});
    for (std::size_t i = 0; i < n; ++i) {
      auto x = batch.row(i);
      for (std::size_t j = 0; j < f; ++j) out.at(i, j) = dot(proj_.row(j), x);
    }
    return out;
  }

  Tensor vjp(const Tensor& batch, const Tensor& upstream) const override {
    const std::size_t n = check_batch(batch), f = proj_.dim(0), d = proj_.dim(1);
    check_upstream(upstream, n);
    Tensor g(batch.dims());
    for (std::size_t i = 0; i < n; ++i) {
      auto gi = g.row(i);
      for (std::size_t j = 0; j < f; ++j) {
        const double u = upstream.at(i, j);
        auto pj = proj_.row(j);
        for (std::size_t k = 0; k < d; ++k) gi[k] += u * pj[k];
      }
    }
    return g;
  }

  std::vector<std::pair<std::string, const Tensor*>> parameters() const override { return {{"projection", &proj_}}; }

 private:
  Dims input_;
  Tensor proj_;
};

/// d -> h -> f with an activation on the hidden layer and a linear output.
class MlpEncoder final : public Encoder {
 public:
  MlpEncoder(Dims input_shape, Tensor w1, Tensor b1, Tensor w2, Tensor b2, Activation act)
      : input_(std::move(input_shape)), w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)), act_(act) {
    const std::size_t d = dims_product(input_);
    if (w1_.rank() != 2 || w1_.dim(1) != d || b1_.size() != w1_.dim(0) || w2_.rank() != 2 ||
        w2_.dim(1) != w1_.dim(0) || b2_.size() != w2_.dim(0))
      throw ShapeError("mlp: inconsistent parameter shapes");
  }

  static MlpEncoder random(Dims input_shape, std::size_t hidden, std::size_t f, Activation act, RngStream& rng) {
    const std::size_t d = dims_product(input_shape);
    Tensor w1(Dims{hidden, d}), b1(Dims{hidden}), w2(Dims{f, hidden}), b2(Dims{f});
    for (double& v : w1.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
    for (double& v : b1.data()) v = 0.1 * rng.normal();
    for (double& v : w2.data()) v = rng.normal() / std::sqrt(static_cast<double>(hidden));
    for (double& v : b2.data()) v = 0.1 * rng.normal();
    return MlpEncoder(std::move(input_shape), std::move(w1), std::move(b1), std::move(w2), std::move(b2), act);
  }

  std::string architecture() const override { return "mlp"; }
  Dims input_shape() const override { return input_; }
  std::size_t feature_dim() const override { return w2_.dim(0); }
  Activation activation() const override { return act_; }

  Tensor forward(const Tensor& batch) const override {
    const std::size_t n = check_batch(batch);
    Tensor out(Dims{n, feature_dim()});
    std::vector<double> hidden(w1_.dim(0));
    for (std::size_t i = 0; i < n; ++i) {
      hidden_layer(batch.row(i), hidden);
      for (std::size_t j = 0; j < feature_dim(); ++j) out.at(i, j) = b2_[j] + dot(w2_.row(j), hidden);
    }
    return out;
  }

  Tensor vjp(const Tensor& batch, const Tensor& upstream) const override {
    const std::size_t n = check_batch(batch);
    check_upstream(upstream, n);
    const std::size_t h = w1_.dim(0), d = w1_.dim(1);
    Tensor g(batch.dims());
    std::vector<double> hidden(h), dh(h);
    for (std::size_t i = 0; i < n; ++i) {
      hidden_layer(batch.row(i), hidden);
      for (std::size_t k = 0; k < h; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < feature_dim(); ++j) s += upstream.at(i, j) * w2_.at(j, k);
        dh[k] = s * detail::activate_grad(act_, hidden[k]);
      }
      auto gi = g.row(i);
      for (std::size_t k = 0; k < h; ++k) {
        auto wk = w1_.row(k);
        for (std::size_t m = 0; m < d; ++m) gi[m] += dh[k] * wk[m];
      }
    }
    return g;
  }

  std::vector<std::pair<std::string, const Tensor*>> parameters() const override {
    return {{"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_}, {"b2", &b2_}};
  }

 private:
  void hidden_layer(std::span<const double> x, std::vector<double>& out) const {
    for (std::size_t k = 0; k < w1_.dim(0); ++k) out[k] = detail::activate(act_, b1_[k] + dot(w1_.row(k), x));
  }

  Dims input_;
  Tensor w1_, b1_, w2_, b2_;
  Activation act_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds in [ci, h, w] into cols [ci * 9, h * w] with zero padding 1.
inline void im2col3x3(const double* in, std::size_t ci, std::size_t h, std::size_t w, double* cols) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        const double* src = in + c * hw;
        for (std::size_t y = 0; y < h; ++y) {
          double* dst = row + y * w;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + w, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
            dst[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : srow[sx];
          }
        }
      }
}

/// Adjoint of im2col3x3: scatter-adds cols back into gin (which is overwritten).
inline void col2im3x3(const double* cols, std::size_t ci, std::size_t h, std::size_t w, double* gin) {
  const std::size_t hw = h * w;
  std::fill(gin, gin + ci * hw, 0.0);
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        double* dst = gin + c * hw;
        const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
        const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
        for (std::size_t y = y0; y < y1; ++y) {
          double* drow = dst + (y + ky - 1) * w;
          const double* grow = row + y * w;
          for (std::size_t x = x0; x < x1; ++x) drow[x + kx - 1] += grow[x];
        }
      }
}

/// 3x3 convolution, zero padding 1, stride 1. in [ci, h, w], weight [co, ci, 3, 3].
inline void conv3x3(const double* in, std::size_t ci, std::size_t h, std::size_t w, const Tensor& weight,
                    const Tensor& bias, double* out) {
  const auto co = static_cast<Eigen::Index>(weight.dim(0));
  const auto k = static_cast<Eigen::Index>(ci * 9), hw = static_cast<Eigen::Index>(h * w);
  std::vector<double> cols(static_cast<std::size_t>(k * hw));
  im2col3x3(in, ci, h, w, cols.data());
  Eigen::Map<const RowMatrix> wm(weight.storage().data(), co, k);
  Eigen::Map<const RowMatrix> cm(cols.data(), k, hw);
  Eigen::Map<RowMatrix> om(out, co, hw);
  Eigen::Map<const Eigen::VectorXd> bv(bias.storage().data(), co);
  om.noalias() = wm * cm;
  om.colwise() += bv;
}

/// Input gradient of conv3x3 (transpose convolution).
inline void conv3x3_input_grad(const double* gout, std::size_t ci, std::size_t h, std::size_t w, const Tensor& weight,
                               double* gin) {
  const auto co = static_cast<Eigen::Index>(weight.dim(0));
  const auto k = static_cast<Eigen::Index>(ci * 9), hw = static_cast<Eigen::Index>(h * w);
  std::vector<double> cols(static_cast<std::size_t>(k * hw));
  Eigen::Map<const RowMatrix> wm(weight.storage().data(), co, k);
  Eigen::Map<const RowMatrix> gm(gout, co, hw);
  Eigen::Map<RowMatrix> cm(cols.data(), k, hw);
  cm.noalias() = wm.transpose() * gm;
  col2im3x3(cols.data(), ci, h, w, gin);
}

/// 2x2 average pooling, stride 2; odd trailing rows/columns are dropped.
inline void avgpool2(const double* in, std::size_t c, std::size_t h, std::size_t w, double* out) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const double* s = in + (k * h + 2 * y) * w + 2 * x;
        out[(k * oh + y) * ow + x] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
}

inline void avgpool2_grad(const double* gout, std::size_t c, std::size_t h, std::size_t w, double* gin) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t i = 0; i < c * h * w; ++i) gin[i] = 0.0;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const double g = 0.25 * gout[(k * oh + y) * ow + x];
        double* s = gin + (k * h + 2 * y) * w + 2 * x;
        s[0] += g;
        s[1] += g;
        s[w] += g;
        s[w + 1] += g;
      }
}

}  // namespace detail

/// conv3x3 -> act -> avgpool2 -> conv3x3 -> act -> avgpool2 -> global
/// average -> linear to f.
class ConvSmallEncoder final : public Encoder {
 public:
  ConvSmallEncoder(Dims input_shape, Tensor conv1_w, Tensor conv1_b, Tensor conv2_w, Tensor conv2_b, Tensor fc_w, Tensor fc_b,
                   Activation act)
      : input_(std::move(input_shape)),
        c1w_(std::move(conv1_w)),
        c1b_(std::move(conv1_b)),
        c2w_(std::move(conv2_w)),
        c2b_(std::move(conv2_b)),
        fcw_(std::move(fc_w)),
        fcb_(std::move(fc_b)),
        act_(act) {
    if (input_.size() != 3 || input_[1] < 4 || input_[2] < 4) throw ShapeError("conv_small: input must be [C, H, W] with H, W >= 4");
    const Dims w1{c1b_.size(), input_[0], 3, 3}, w2{c2b_.size(), c1b_.size(), 3, 3};
    if (c1w_.dims() != w1 || c2w_.dims() != w2 || fcw_.rank() != 2 || fcw_.dim(1) != c2b_.size() || fcb_.size() != fcw_.dim(0))
      throw ShapeError("conv_small: inconsistent parameter shapes");
  }

  static ConvSmallEncoder random(Dims input_shape, std::size_t c1, std::size_t c2, std::size_t f, Activation act, RngStream& rng) {
    const std::size_t cin = input_shape.at(0);
    Tensor w1(Dims{c1, cin, 3, 3}), b1(Dims{c1}), w2(Dims{c2, c1, 3, 3}), b2(Dims{c2}), fw(Dims{f, c2}), fb(Dims{f});
    const double s1 = std::sqrt(2.0 / static_cast<double>(cin * 9));
    const double s2 = std::sqrt(2.0 / static_cast<double>(c1 * 9));
    for (double& v : w1.data()) v = rng.normal() * s1;
    for (double& v : b1.data()) v = 0.1 * rng.normal();
    for (double& v : w2.data()) v = rng.normal() * s2;
    for (double& v : b2.data()) v = 0.1 * rng.normal();
    for (double& v : fw.data()) v = rng.normal() / std::sqrt(static_cast<double>(c2));
    for (double& v : fb.data()) v = 0.1 * rng.normal();
    return ConvSmallEncoder(std::move(input_shape), std::move(w1), std::move(b1), std::move(w2), std::move(b2), std::move(fw),
                            std::move(fb), act);
  }

  std::string architecture() const override { return "conv_small"; }
  Dims input_shape() const override { return input_; }
  std::size_t feature_dim() const override { return fcw_.dim(0); }
  Activation activation() const override { return act_; }

  Tensor forward(const Tensor& batch) const override {
    const std::size_t n = check_batch(batch);
    Tensor out(Dims{n, feature_dim()});
    Buffers buf = buffers();
    for (std::size_t i = 0; i < n; ++i) {
      run(batch.row(i).data(), buf);
      write_features(buf, out.row(i));
    }
    return out;
  }

  Tensor vjp(const Tensor& batch, const Tensor& upstream) const override {
    const std::size_t n = check_batch(batch);
    check_upstream(upstream, n);
    const auto [h, w, h2, w2, h4, w4] = sizes();
    const std::size_t c1 = c1b_.size(), c2 = c2b_.size(), f = feature_dim();
    Tensor g(batch.dims());
    Buffers buf = buffers();
    std::vector<double> g_pool2(c2 * h4 * w4), g_a2(c2 * h2 * w2), g_pool1(c1 * h2 * w2), g_a1(c1 * h * w);
    for (std::size_t i = 0; i < n; ++i) {
      run(batch.row(i).data(), buf);
      // linear + global average
      const double inv_area = 1.0 / static_cast<double>(h4 * w4);
      for (std::size_t k = 0; k < c2; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < f; ++j) s += upstream.at(i, j) * fcw_.at(j, k);
        for (std::size_t p = 0; p < h4 * w4; ++p) g_pool2[k * h4 * w4 + p] = s * inv_area;
      }
      detail::avgpool2_grad(g_pool2.data(), c2, h2, w2, g_a2.data());
      for (std::size_t p = 0; p < g_a2.size(); ++p) g_a2[p] *= detail::activate_grad(act_, buf.a2[p]);
      detail::conv3x3_input_grad(g_a2.data(), c1, h2, w2, c2w_, g_pool1.data());
      detail::avgpool2_grad(g_pool1.data(), c1, h, w, g_a1.data());
      for (std::size_t p = 0; p < g_a1.size(); ++p) g_a1[p] *= detail::activate_grad(act_, buf.a1[p]);
      detail::conv3x3_input_grad(g_a1.data(), input_[0], h, w, c1w_, g.row(i).data());
    }
    return g;
  }

  std::vector<std::pair<std::string, const Tensor*>> parameters() const override {
    return {{"conv1_w", &c1w_}, {"conv1_b", &c1b_}, {"conv2_w", &c2w_}, {"conv2_b", &c2b_}, {"fc_w", &fcw_}, {"fc_b", &fcb_}};
  }

  std::size_t pooled_dim() const { return c2b_.size(); }

  /// Globally averaged second-stage activations [N, conv2], the input of the
  /// final linear layer.
  Tensor pooled_features(const Tensor& batch) const {
    const std::size_t n = check_batch(batch);
    Tensor out(Dims{n, pooled_dim()});
    Buffers buf = buffers();
    for (std::size_t i = 0; i < n; ++i) {
      run(batch.row(i).data(), buf);
      const auto p = pool(buf);
      std::copy(p.begin(), p.end(), out.row(i).begin());
    }
    return out;
  }

  /// Same convolutions with a different final linear layer.
  ConvSmallEncoder with_linear(Tensor fc_w, Tensor fc_b) const {
    return ConvSmallEncoder(input_, c1w_, c1b_, c2w_, c2b_, std::move(fc_w), std::move(fc_b), act_);
  }

 private:
  struct Buffers {
    std::vector<double> a1, p1, a2, p2;
  };

  struct Sizes {
    std::size_t h, w, h2, w2, h4, w4;
  };

  Sizes sizes() const {
    const std::size_t h = input_[1], w = input_[2];
    return {h, w, h / 2, w / 2, h / 4, w / 4};
  }

  Buffers buffers() const {
    const auto s = sizes();
    return Buffers{std::vector<double>(c1b_.size() * s.h * s.w), std::vector<double>(c1b_.size() * s.h2 * s.w2),
                   std::vector<double>(c2b_.size() * s.h2 * s.w2), std::vector<double>(c2b_.size() * s.h4 * s.w4)};
  }

  void run(const double* x, Buffers& b) const {
    const auto s = sizes();
    const std::size_t c1 = c1b_.size(), c2 = c2b_.size();
    detail::conv3x3(x, input_[0], s.h, s.w, c1w_, c1b_, b.a1.data());
    for (double& v : b.a1) v = detail::activate(act_, v);
    detail::avgpool2(b.a1.data(), c1, s.h, s.w, b.p1.data());
    detail::conv3x3(b.p1.data(), c1, s.h2, s.w2, c2w_, c2b_, b.a2.data());
    for (double& v : b.a2) v = detail::activate(act_, v);
    detail::avgpool2(b.a2.data(), c2, s.h2, s.w2, b.p2.data());
  }

  std::vector<double> pool(const Buffers& b) const {
    const auto s = sizes();
    const std::size_t c2 = c2b_.size(), area = s.h4 * s.w4;
    std::vector<double> pooled(c2);
    for (std::size_t k = 0; k < c2; ++k) {
      double acc = 0;
      for (std::size_t p = 0; p < area; ++p) acc += b.p2[k * area + p];
      pooled[k] = acc / static_cast<double>(area);
    }
    return pooled;
  }

  void write_features(const Buffers& b, std::span<double> out) const {
    const std::vector<double> pooled = pool(b);
    for (std::size_t j = 0; j < feature_dim(); ++j) out[j] = fcb_[j] + dot(fcw_.row(j), pooled);
  }

  Dims input_;
  Tensor c1w_, c1b_, c2w_, c2b_, fcw_, fcb_;
  Activation act_;
};

/// Refits the final linear layer of a conv_small encoder as PCA whitening of
/// its pooled activations over `images` (labels are not used): output j is
/// the projection on the j-th principal axis divided by its standard
/// deviation, so features come out centered with identity covariance on the
/// fitting set. Each axis is signed so its largest-magnitude entry is positive.
inline ConvSmallEncoder whiten_linear(const ConvSmallEncoder& enc, std::span<const Tensor> images, std::size_t components,
                                      std::size_t batch_size = 64) {
  const std::size_t c2 = enc.pooled_dim(), n = images.size();
  if (components == 0 || components > c2)
    throw InvalidArgument("whiten_linear: components must be in [1, " + std::to_string(c2) + "]");
  if (n < 2) throw InvalidArgument("whiten_linear: need at least two images");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c2));
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    const Tensor p = enc.pooled_features(stack(images.subspan(start, stop - start)));
    for (std::size_t i = start; i < stop; ++i)
      for (std::size_t k = 0; k < c2; ++k) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = p.at(i - start, k);
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double floor = 1e-12 * std::max(eig.eigenvalues().maxCoeff(), 1e-300);
  Tensor w(Dims{components, c2}), b(Dims{components});
  for (std::size_t j = 0; j < components; ++j) {
    const Eigen::Index col = static_cast<Eigen::Index>(c2 - 1 - j);
    Eigen::VectorXd axis = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    const double lambda = eig.eigenvalues()(col);
    if (!(lambda > floor)) throw InvalidArgument("whiten_linear: pooled activations have rank below " + std::to_string(components));
    axis /= std::sqrt(lambda);
    for (std::size_t k = 0; k < c2; ++k) w.at(j, k) = axis(static_cast<Eigen::Index>(k));
    b[j] = -axis.dot(mean.transpose());
  }
  return enc.with_linear(std::move(w), std::move(b));
}

/// Construction parameters for the built-in encoders.
struct EncoderSpec {
  std::string architecture = "identity";
  Dims input_shape;
  std::size_t feature_dim = 0;  // 0: same as input size (identity)
  std::size_t hidden = 64;
  std::size_t conv1 = 8;
  std::size_t conv2 = 16;
  Activation activation = Activation::Tanh;
  std::uint64_t seed = 0;
  /// conv_small only: fit the final layer as PCA whitening on unlabeled
  /// images (see whiten_linear); feature_dim 0 keeps every component.
  bool whiten = false;
};

inline std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec, std::span<const Tensor> fit_images = {}) {
  if (spec.input_shape.empty()) throw InvalidArgument("encoder: input shape required");
  if (spec.whiten) {
    if (spec.architecture != "conv_small") throw InvalidArgument("encoder: whitening is only defined for conv_small");
    if (fit_images.empty()) throw InvalidArgument("encoder: whitening needs images to fit on");
    RngStream rng(spec.seed, 0xE2C0DE);
    const ConvSmallEncoder base =
        ConvSmallEncoder::random(spec.input_shape, spec.conv1, spec.conv2, spec.conv2, spec.activation, rng);
    return std::make_unique<ConvSmallEncoder>(whiten_linear(base, fit_images, spec.feature_dim ? spec.feature_dim : spec.conv2));
  }
  RngStream rng(spec.seed, 0xE2C0DE);
  const std::size_t d = dims_product(spec.input_shape);
  const std::size_t f = spec.feature_dim ? spec.feature_dim : d;
  if (spec.architecture == "identity") {
    if (spec.input_shape.size() != 1) throw InvalidArgument("identity encoder takes vectors");
    if (f != d) throw InvalidArgument("identity encoder: feature_dim must equal input size");
    return std::make_unique<IdentityEncoder>(d);
  }
  if (spec.architecture == "random_projection")
    return std::make_unique<RandomProjectionEncoder>(RandomProjectionEncoder::random(spec.input_shape, f, rng));
  if (spec.architecture == "mlp")
    return std::make_unique<MlpEncoder>(MlpEncoder::random(spec.input_shape, spec.hidden, f, spec.activation, rng));
  if (spec.architecture == "conv_small")
    return std::make_unique<ConvSmallEncoder>(
        ConvSmallEncoder::random(spec.input_shape, spec.conv1, spec.conv2, f, spec.activation, rng));
  throw InvalidArgument("unknown encoder architecture '" + spec.architecture + "'");
}

/// Writes manifest.txt plus one NDT per parameter.
inline void save_encoder(const Encoder& enc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw IoError((dir / "manifest.txt").string() + ": cannot open for writing");
  man << "architecture " << enc.architecture() << '\n';
  man << "activation " << to_string(enc.activation()) << '\n';
  man << "input";
  for (std::size_t d : enc.input_shape()) man << ' ' << d;
  man << "\nfeature_dim " << enc.feature_dim() << '\n';
  for (const auto& [name, t] : enc.parameters()) {
    man << "param " << name;
    for (std::size_t d : t->dims()) man << ' ' << d;
    man << '\n';
    ndt::write_f64(dir / (name + ".ndt"), *t);
  }
}

inline std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& dir) {
  const auto man_path = dir / "manifest.txt";
  std::ifstream man(man_path);
  if (!man) throw IoError(man_path.string() + ": cannot open for reading");
  std::string arch;
  Activation act = Activation::Tanh;
  Dims input;
  std::size_t fdim = 0;
  std::map<std::string, Tensor> params;
  std::string line;
  while (std::getline(man, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "architecture") {
      ls >> arch;
    } else if (key == "activation") {
      std::string a;
      ls >> a;
      act = parse_activation(a);
    } else if (key == "input") {
      std::size_t d;
      while (ls >> d) input.push_back(d);
    } else if (key == "feature_dim") {
      ls >> fdim;
    } else if (key == "param") {
      std::string name;
      ls >> name;
      Dims want;
      std::size_t d;
      while (ls >> d) want.push_back(d);
      Tensor t = ndt::read_f64(dir / (name + ".ndt"));
      if (t.dims() != want)
        throw FormatError((dir / (name + ".ndt")).string() + ": dims " + dims_string(t.dims()) + " disagree with manifest " +
                          dims_string(want));
      params.emplace(name, std::move(t));
    } else {
      throw FormatError(man_path.string() + ": unknown key '" + key + "'");
    }
  }
  auto take = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError(man_path.string() + ": missing parameter '" + name + "'");
    return it->second;
  };
  std::unique_ptr<Encoder> enc;
  if (arch == "identity") {
    enc = std::make_unique<IdentityEncoder>(dims_product(input));
  } else if (arch == "random_projection") {
    enc = std::make_unique<RandomProjectionEncoder>(input, take("projection"));
  } else if (arch == "mlp") {
    enc = std::make_unique<MlpEncoder>(input, take("w1"), take("b1"), take("w2"), take("b2"), act);
  } else if (arch == "conv_small") {
    enc = std::make_unique<ConvSmallEncoder>(input, take("conv1_w"), take("conv1_b"), take("conv2_w"), take("conv2_b"),
                                             take("fc_w"), take("fc_b"), act);
  } else {
    throw FormatError(man_path.string() + ": unknown architecture '" + arch + "'");
  }
  if (fdim && fdim != enc->feature_dim()) throw FormatError(man_path.string() + ": feature_dim disagrees with parameters");
  return enc;
}

}  // namespace lingm
