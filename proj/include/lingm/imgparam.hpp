#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lingm/ndt.hpp"
#include "lingm/ops.hpp"
#include "lingm/resize.hpp"
#include "lingm/rng.hpp"

namespace lingm {

/// Multi-resolution parameterization of one synthetic RGB image. Levels are
/// stored coarse to fine; only the first `active_count` take part in rendering.
struct PyramidImage {
  std::vector<Tensor> levels;
  std::size_t active_count = 1;

  std::size_t max_resolution() const { return levels.back().dim(1); }
  std::size_t level_count() const { return levels.size(); }

  void validate() const {
    if (levels.empty()) throw InvalidArgument("pyramid: no levels");
    if (active_count < 1 || active_count > levels.size())
      throw InvalidArgument("pyramid: active_count out of range");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const Tensor& l = levels[i];
      if (l.rank() != 3 || l.dim(0) != 3 || l.dim(1) != l.dim(2))
        throw ShapeError("pyramid: level must be [3, r, r], got " + dims_string(l.dims()));
      if (i > 0 && l.dim(1) != 2 * levels[i - 1].dim(1))
        throw ShapeError("pyramid: level resolutions must double");
    }
  }
};

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

/// Resolutions 1, 2, 4, ..., R.
inline std::vector<std::size_t> pyramid_resolutions(std::size_t max_resolution) {
  if (!is_power_of_two(max_resolution)) throw InvalidArgument("pyramid: max resolution must be a power of two");
  std::vector<std::size_t> out;
  for (std::size_t r = 1; r <= max_resolution; r *= 2) out.push_back(r);
  return out;
}

/// Every level i.i.d. N(0, 1); only the coarsest level starts active.
inline PyramidImage init_pyramid(RngStream& rng, std::size_t max_resolution) {
  PyramidImage p;
  for (std::size_t r : pyramid_resolutions(max_resolution)) {
    Tensor level(Dims{3, r, r});
    for (double& v : level.data()) v = rng.normal();
    p.levels.push_back(std::move(level));
  }
  p.active_count = 1;
  return p;
}

/// Single full-resolution level, active from the start (no-pyramid ablation).
inline PyramidImage init_pixels(RngStream& rng, std::size_t resolution) {
  PyramidImage p;
  Tensor level(Dims{3, resolution, resolution});
  for (double& v : level.data()) v = rng.normal();
  p.levels.push_back(std::move(level));
  p.active_count = 1;
  return p;
}

/// Stored values are untouched; render divides by the active count.
inline PyramidImage activate_next_level(PyramidImage p) {
  if (p.active_count < p.levels.size()) ++p.active_count;
  return p;
}

/// Fixed per-pixel 3x3 channel transform (row-major).
struct ColorTransform {
  std::array<double, 9> matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static ColorTransform identity() { return {}; }

  double condition_number() const {
    Eigen::Matrix3d m;
    for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = matrix[static_cast<std::size_t>(i)];
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
    const auto& s = svd.singularValues();
    return s(2) > 0 ? s(0) / s(2) : INFINITY;
  }

  void validate() const {
    require_finite(matrix, "color transform");
    if (!(condition_number() < 1e6)) throw InvalidArgument("color transform is not safely invertible");
  }
};

/// Cholesky factor of the per-pixel channel covariance of `images` ([3, h, w]
/// each). Falls back to identity when the covariance is near-singular.
inline ColorTransform color_matrix_from_dataset(std::span<const Tensor> images) {
  if (images.empty()) throw InvalidArgument("color_matrix_from_dataset: no images");
  std::array<double, 3> mean{};
  double count = 0;
  for (const Tensor& img : images) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("color_matrix_from_dataset: images must be [3, h, w]");
    require_finite(img, "color_matrix_from_dataset");
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < hw; ++i) mean[c] += img[c * hw + i];
    count += static_cast<double>(hw);
  }
  for (double& m : mean) m /= count;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const Tensor& img : images) {
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t i = 0; i < hw; ++i) {
      Eigen::Vector3d d(img[i] - mean[0], img[hw + i] - mean[1], img[2 * hw + i] - mean[2]);
      cov += d * d.transpose();
    }
  }
  cov /= count;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const auto& ev = eig.eigenvalues();
  // cond(L) = sqrt(cond(cov)) must stay below 1e6.
  if (!(ev(2) > 0) || ev(0) <= 1e-12 * ev(2)) return ColorTransform::identity();
  Eigen::LLT<Eigen::Matrix3d> llt(cov);
  if (llt.info() != Eigen::Success) return ColorTransform::identity();
  const Eigen::Matrix3d l = llt.matrixL();
  ColorTransform ct;
  for (int i = 0; i < 9; ++i) ct.matrix[static_cast<std::size_t>(i)] = l(i / 3, i % 3);
  return ct;
}

/// Rescales a color transform so its largest column norm is 1.
inline ColorTransform normalize_columns(ColorTransform ct) {
  double mx = 0;
  for (int col = 0; col < 3; ++col) {
    double s = 0;
    for (int row = 0; row < 3; ++row) s += ct.matrix[row * 3 + col] * ct.matrix[row * 3 + col];
    mx = std::max(mx, std::sqrt(s));
  }
  if (mx > 0)
    for (double& v : ct.matrix) v /= mx;
  return ct;
}

namespace detail {

/// Pre-sigmoid composite: mean of active levels upsampled to R, then the
/// color transform per pixel.
inline Tensor pyramid_pre_activation(const PyramidImage& p, const ColorTransform& ct) {
  p.validate();
  const std::size_t r = p.max_resolution();
  Tensor sum(Dims{3, r, r});
  for (std::size_t i = 0; i < p.active_count; ++i) sum += bilinear_resize(p.levels[i], r, r);
  sum *= 1.0 / static_cast<double>(p.active_count);
  const std::size_t hw = r * r;
  Tensor rgb(Dims{3, r, r});
  const auto& m = ct.matrix;
  for (std::size_t i = 0; i < hw; ++i) {
    const double a = sum[i], b = sum[hw + i], c = sum[2 * hw + i];
    rgb[i] = m[0] * a + m[1] * b + m[2] * c;
    rgb[hw + i] = m[3] * a + m[4] * b + m[5] * c;
    rgb[2 * hw + i] = m[6] * a + m[7] * b + m[8] * c;
  }
  return rgb;
}

}  // namespace detail

/// sigmoid(gain * M * mean_active(resize_R(P_r))). gain = 2 gives the
/// 1/2 + 1/2 tanh(.) form.
inline Tensor render(const PyramidImage& p, const ColorTransform& ct, double gain = 1.0) {
  Tensor x = detail::pyramid_pre_activation(p, ct);
  for (double& v : x.data()) v = sigmoid(gain * v);
  return x;
}

/// Gradient of render w.r.t. every level; inactive levels get zeros.
inline std::vector<Tensor> render_vjp(const PyramidImage& p, const ColorTransform& ct, const Tensor& upstream,
                                      double gain = 1.0) {
  Tensor pre = detail::pyramid_pre_activation(p, ct);
  upstream.require_same_shape(pre, "render_vjp");
  require_finite(upstream, "render_vjp");
  const std::size_t r = p.max_resolution();
  const std::size_t hw = r * r;
  Tensor d_rgb(Dims{3, r, r});
  for (std::size_t i = 0; i < d_rgb.size(); ++i) {
    const double s = sigmoid(gain * pre[i]);
    d_rgb[i] = upstream[i] * gain * s * (1.0 - s);
  }
  const auto& m = ct.matrix;
  const double inv = 1.0 / static_cast<double>(p.active_count);
  Tensor d_sum(Dims{3, r, r});
  for (std::size_t i = 0; i < hw; ++i) {
    const double a = d_rgb[i], b = d_rgb[hw + i], c = d_rgb[2 * hw + i];
    d_sum[i] = (m[0] * a + m[3] * b + m[6] * c) * inv;
    d_sum[hw + i] = (m[1] * a + m[4] * b + m[7] * c) * inv;
    d_sum[2 * hw + i] = (m[2] * a + m[5] * b + m[8] * c) * inv;
  }
  std::vector<Tensor> grads;
  grads.reserve(p.levels.size());
  for (std::size_t i = 0; i < p.levels.size(); ++i) {
    const std::size_t lr = p.levels[i].dim(1);
    if (i < p.active_count)
      grads.push_back(bilinear_resize_vjp(d_sum, lr, lr));
    else
      grads.emplace_back(p.levels[i].dims());
  }
  return grads;
}

/// One NDT per level plus manifest.txt with resolutions, active count and
/// iteration.
inline void save_pyramid(const std::filesystem::path& dir, const PyramidImage& p, std::size_t iteration) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw IoError((dir / "manifest.txt").string() + ": cannot open for writing");
  man << "resolutions";
  for (const Tensor& l : p.levels) man << ' ' << l.dim(1);
  man << "\nactive_count " << p.active_count << "\niteration " << iteration << '\n';
  for (const Tensor& l : p.levels) ndt::write_f64(dir / ("level_" + std::to_string(l.dim(1)) + ".ndt"), l);
}

struct PyramidCheckpoint {
  PyramidImage pyramid;
  std::size_t iteration = 0;
};

inline PyramidCheckpoint load_pyramid(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw IoError((dir / "manifest.txt").string() + ": cannot open for reading");
  PyramidCheckpoint ck;
  std::vector<std::size_t> res;
  std::string line;
  while (std::getline(man, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "resolutions") {
      std::size_t r;
      while (ls >> r) res.push_back(r);
    } else if (key == "active_count") {
      ls >> ck.pyramid.active_count;
    } else if (key == "iteration") {
      ls >> ck.iteration;
    } else if (!key.empty()) {
      throw FormatError((dir / "manifest.txt").string() + ": unknown key '" + key + "'");
    }
  }
  for (std::size_t r : res) ck.pyramid.levels.push_back(ndt::read_f64(dir / ("level_" + std::to_string(r) + ".ndt")));
  ck.pyramid.validate();
  return ck;
}

}  // namespace lingm
