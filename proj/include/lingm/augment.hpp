#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lingm/resize.hpp"
#include "lingm/rng.hpp"

namespace lingm {

struct AugmentConfig {
  bool flip = true;
  bool crop = true;
  bool noise = true;
  double flip_prob = 0.5;
  double area_min = 0.08;
  double area_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  double noise_std = 0.2;
  std::size_t rounds = 10;
  /// Crop output size; 0 keeps the source size.
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  void validate() const {
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw InvalidArgument("augment: flip_prob must be in [0, 1]");
    if (!(area_min > 0 && area_min <= area_max && area_max <= 1)) throw InvalidArgument("augment: bad crop area range");
    if (!(aspect_min > 0 && aspect_min <= aspect_max)) throw InvalidArgument("augment: bad crop aspect range");
    if (!(noise_std >= 0)) throw InvalidArgument("augment: noise std must be >= 0");
    if (rounds < 1) throw InvalidArgument("augment: rounds must be >= 1");
  }

  /// Everything off: apply() is the identity (up to resizing to out_h x out_w).
  static AugmentConfig none() {
    AugmentConfig c;
    c.flip = c.crop = c.noise = false;
    c.rounds = 1;
    return c;
  }
};

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool operator==(const CropBox&) const = default;
};

/// One replayable draw. Image params describe [C, src_h, src_w] inputs;
/// vector params (src_h == 0) apply noise only.
struct AugmentationParams {
  bool flip = false;
  CropBox crop;
  std::size_t src_h = 0, src_w = 0;
  std::size_t out_h = 0, out_w = 0;
  double sigma = 0.0;
  std::uint64_t noise_seed = 0;
  std::uint64_t noise_stream = 0;

  bool is_vector() const { return src_h == 0; }
  bool operator==(const AugmentationParams&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const AugmentationParams& p) {
  os << "flip=" << p.flip << " crop=" << p.crop.top << ',' << p.crop.left << ',' << p.crop.height << ','
     << p.crop.width << " src=" << p.src_h << 'x' << p.src_w << " out=" << p.out_h << 'x' << p.out_w
     << " sigma=" << std::setprecision(17) << p.sigma << " noise=" << p.noise_seed << ':' << p.noise_stream;
  return os;
}

inline AugmentationParams sample_params(RngStream& rng, const AugmentConfig& cfg, std::size_t src_h, std::size_t src_w) {
  cfg.validate();
  if (src_h == 0 || src_w == 0) throw ShapeError("sample_params: source size must be positive");
  AugmentationParams p;
  p.src_h = src_h;
  p.src_w = src_w;
  p.out_h = cfg.out_h ? cfg.out_h : src_h;
  p.out_w = cfg.out_w ? cfg.out_w : src_w;
  p.flip = cfg.flip && rng.bernoulli(cfg.flip_prob);
  p.crop = CropBox{0, 0, src_h, src_w};
  if (cfg.crop) {
    const double area = static_cast<double>(src_h * src_w);
    const double log_lo = std::log(cfg.aspect_min), log_hi = std::log(cfg.aspect_max);
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double target = area * rng.uniform(cfg.area_min, cfg.area_max);
      const double aspect = std::exp(rng.uniform(log_lo, log_hi));
      const auto w = static_cast<std::size_t>(std::llround(std::sqrt(target * aspect)));
      const auto h = static_cast<std::size_t>(std::llround(std::sqrt(target / aspect)));
      if (w > 0 && h > 0 && w <= src_w && h <= src_h) {
        p.crop.top = rng.below(src_h - h + 1);
        p.crop.left = rng.below(src_w - w + 1);
        p.crop.height = h;
        p.crop.width = w;
        break;
      }
    }
  }
  if (cfg.noise && cfg.noise_std > 0) {
    p.sigma = cfg.noise_std;
    p.noise_seed = rng.next_u64();
    p.noise_stream = rng.next_u64();
  }
  return p;
}

/// Noise-only params for a vector sample.
inline AugmentationParams sample_vector_params(RngStream& rng, const AugmentConfig& cfg, std::size_t dim) {
  AugmentationParams p;
  p.out_w = dim;
  if (cfg.noise && cfg.noise_std > 0) {
    p.sigma = cfg.noise_std;
    p.noise_seed = rng.next_u64();
    p.noise_stream = rng.next_u64();
  }
  return p;
}

namespace detail {

inline void add_noise(Tensor& t, const AugmentationParams& p) {
  if (p.sigma == 0.0) return;
  RngStream noise(p.noise_seed, p.noise_stream);
  for (double& v : t.data()) v += p.sigma * noise.normal();
}

inline Tensor flip_horizontal(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.dims());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(k, y, x) = img.at(k, y, w - 1 - x);
  return out;
}

inline void check_params(const Tensor& img, const AugmentationParams& p) {
  if (p.is_vector()) {
    if (img.size() != p.out_w) throw ShapeError("augment: vector params do not match input length");
    return;
  }
  if (img.rank() != 3 || img.dim(1) != p.src_h || img.dim(2) != p.src_w)
    throw ShapeError("augment: params were drawn for a " + std::to_string(p.src_h) + "x" + std::to_string(p.src_w) +
                     " source, got " + dims_string(img.dims()));
  const CropBox& b = p.crop;
  if (b.height == 0 || b.width == 0 || b.top + b.height > p.src_h || b.left + b.width > p.src_w)
    throw InvalidArgument("augment: crop box out of bounds");
  if (p.out_h == 0 || p.out_w == 0) throw InvalidArgument("augment: output size must be positive");
}

}  // namespace detail

/// flip -> crop + bilinear resize to (out_h, out_w) -> + sigma * noise.
inline Tensor apply(const Tensor& img, const AugmentationParams& p) {
  detail::check_params(img, p);
  require_finite(img, "augment apply");
  if (p.is_vector()) {
    Tensor out = img;
    detail::add_noise(out, p);
    return out;
  }
  const Tensor src = p.flip ? detail::flip_horizontal(img) : img;
  const CropBox& b = p.crop;
  const std::size_t c = src.dim(0);
  Tensor cropped(Dims{c, b.height, b.width});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < b.height; ++y)
      for (std::size_t x = 0; x < b.width; ++x) cropped.at(k, y, x) = src.at(k, b.top + y, b.left + x);
  Tensor out = bilinear_resize(cropped, p.out_h, p.out_w);
  detail::add_noise(out, p);
  return out;
}

/// Adjoint of the linear part of apply; noise contributes no gradient.
inline Tensor apply_vjp(const AugmentationParams& p, const Tensor& upstream) {
  require_finite(upstream, "augment apply_vjp");
  if (p.is_vector()) {
    if (upstream.size() != p.out_w) throw ShapeError("augment apply_vjp: vector length mismatch");
    return upstream;
  }
  if (upstream.rank() != 3 || upstream.dim(1) != p.out_h || upstream.dim(2) != p.out_w)
    throw ShapeError("augment apply_vjp: upstream shape " + dims_string(upstream.dims()) + " does not match params");
  const CropBox& b = p.crop;
  const std::size_t c = upstream.dim(0);
  Tensor g_crop = bilinear_resize_vjp(upstream, b.height, b.width);
  Tensor g(Dims{c, p.src_h, p.src_w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < b.height; ++y)
      for (std::size_t x = 0; x < b.width; ++x) g.at(k, b.top + y, b.left + x) = g_crop.at(k, y, x);
  return p.flip ? detail::flip_horizontal(g) : g;
}

inline AugmentationParams draw_params_for(RngStream& rng, const AugmentConfig& cfg, const Tensor& sample) {
  if (sample.rank() == 3) return sample_params(rng, cfg, sample.dim(1), sample.dim(2));
  return sample_vector_params(rng, cfg, sample.size());
}

struct ExpandedBatch {
  std::vector<Tensor> items;
  std::vector<AugmentationParams> params;
  /// Index of the source image each item was drawn from.
  std::vector<std::size_t> source;
};

/// cfg.rounds independent draws per image, concatenated round-major.
inline ExpandedBatch expand_batch(std::span<const Tensor> images, const AugmentConfig& cfg, RngStream& rng) {
  cfg.validate();
  ExpandedBatch out;
  const std::size_t n = images.size();
  out.items.reserve(n * cfg.rounds);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      auto p = draw_params_for(rng, cfg, images[i]);
      out.items.push_back(apply(images[i], p));
      out.params.push_back(p);
      out.source.push_back(i);
    }
  }
  return out;
}

template <class T>
std::vector<T> replicate_labels(std::span<const T> labels, std::size_t rounds) {
  std::vector<T> out;
  out.reserve(labels.size() * rounds);
  for (std::size_t r = 0; r < rounds; ++r) out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// One line per draw, for replay and debugging.
inline void write_params_manifest(std::ostream& os, std::span<const AugmentationParams> params) {
  for (const auto& p : params) os << p << '\n';
}

}  // namespace lingm
