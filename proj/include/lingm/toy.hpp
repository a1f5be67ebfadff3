#pragma once

// Small synthetic datasets for end-to-end checks at desk scale.

#include <algorithm>
#include <cmath>
#include <string>

#include "lingm/embedding.hpp"
#include "lingm/rng.hpp"

namespace lingm::toy {

struct GaussianMixtureSpec {
  std::size_t classes = 5;
  std::size_t dim = 16;
  double sigma = 0.5;
  /// Distance between any two class means.
  double separation = 1.0;
  std::size_t samples = 500;  // total, split evenly across classes
};

/// Class c has mean (separation / sqrt 2) * e_c and isotropic noise sigma.
/// Samples are interleaved by class (label = i mod classes).
inline LabeledSet gaussian_mixture(const GaussianMixtureSpec& spec, RngStream rng) {
  if (spec.classes > spec.dim) throw InvalidArgument("gaussian_mixture: needs dim >= classes");
  LabeledSet out;
  out.num_classes = spec.classes;
  const double scale = spec.separation / std::sqrt(2.0);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const auto c = static_cast<std::uint32_t>(i % spec.classes);
    Tensor x(Dims{spec.dim});
    for (double& v : x.data()) v = spec.sigma * rng.normal();
    x[c] += scale;
    out.samples.push_back(std::move(x));
    out.labels.push_back(c);
  }
  for (std::size_t c = 0; c < spec.classes; ++c) out.class_names.push_back("g" + std::to_string(c));
  return out;
}

struct ShapesSpec {
  std::size_t per_class = 300;
  std::size_t size = 32;
  double pixel_noise = 0.03;
  /// Scale of the per-channel color offsets around the gray base levels.
  double color_jitter = 0.5;
};

/// Disk / square / cross on a dark background, with jittered position, size
/// and color.
inline LabeledSet shapes(const ShapesSpec& spec, RngStream rng) {
  LabeledSet out;
  out.num_classes = 3;
  out.class_names = {"cross", "disk", "square"};
  const double s = static_cast<double>(spec.size);
  for (std::size_t i = 0; i < 3 * spec.per_class; ++i) {
    const auto label = static_cast<std::uint32_t>(i % 3);
    Tensor img(Dims{3, spec.size, spec.size});
    double bg[3], fg[3];
    const double bgb = rng.uniform(0.0, 0.2), fgb = rng.uniform(0.6, 0.9);
    for (double& v : bg) v = bgb + spec.color_jitter * rng.uniform(-0.1, 0.1);
    for (double& v : fg) v = fgb + spec.color_jitter * rng.uniform(-0.3, 0.3);
    const double cx = rng.uniform(0.32 * s, 0.68 * s), cy = rng.uniform(0.32 * s, 0.68 * s);
    const double extent = rng.uniform(0.18 * s, 0.3 * s);
    const double arm = std::max(1.5, 0.07 * s);
    for (std::size_t y = 0; y < spec.size; ++y) {
      for (std::size_t x = 0; x < spec.size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        bool inside = false;
        switch (label) {
          case 0: inside = (std::abs(dx) <= extent && std::abs(dy) <= arm) || (std::abs(dy) <= extent && std::abs(dx) <= arm); break;
          case 1: inside = dx * dx + dy * dy <= extent * extent; break;
          default: inside = std::abs(dx) <= 0.8 * extent && std::abs(dy) <= 0.8 * extent; break;
        }
        for (std::size_t c = 0; c < 3; ++c)
          img.at(c, y, x) = std::clamp((inside ? fg[c] : bg[c]) + spec.pixel_noise * rng.normal(), 0.0, 1.0);
      }
    }
    out.samples.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace lingm::toy
