#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lingm/tensor.hpp"

namespace lingm {

namespace detail {

/// Two-tap interpolation weights for one output coordinate.
struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

/// Half-pixel-center sampling: s = (d + 0.5) * in / out - 0.5, clamped to [0, in - 1].
inline std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double hi = static_cast<double>(in - 1);
  for (std::size_t d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, hi);
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double w1 = s - static_cast<double>(i0);
    taps[d] = Tap{i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

inline void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected [C, H, W], got " + dims_string(t.dims()));
}

}  // namespace detail

/// Bilinear resize of a [C, h, w] image to [C, out_h, out_w].
inline Tensor bilinear_resize(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  detail::require_chw(img, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output size must be positive");
  require_finite(img, "bilinear_resize");
  const std::size_t channels = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  const auto ty = detail::resize_taps(h, out_h);
  const auto tx = detail::resize_taps(w, out_w);
  Tensor out(Dims{channels, out_h, out_w});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        out.at(c, y, x) = a.w0 * (b.w0 * img.at(c, a.i0, b.i0) + b.w1 * img.at(c, a.i0, b.i1)) +
                          a.w1 * (b.w0 * img.at(c, a.i1, b.i0) + b.w1 * img.at(c, a.i1, b.i1));
      }
    }
  }
  return out;
}

/// Exact transpose of bilinear_resize: maps a [C, out_h, out_w] cotangent
/// back to [C, h, w].
inline Tensor bilinear_resize_vjp(const Tensor& upstream, std::size_t h, std::size_t w) {
  detail::require_chw(upstream, "bilinear_resize_vjp");
  if (h == 0 || w == 0) throw ShapeError("bilinear_resize_vjp: source size must be positive");
  require_finite(upstream, "bilinear_resize_vjp");
  const std::size_t channels = upstream.dim(0), out_h = upstream.dim(1), out_w = upstream.dim(2);
  if (h == out_h && w == out_w) return upstream;
  const auto ty = detail::resize_taps(h, out_h);
  const auto tx = detail::resize_taps(w, out_w);
  Tensor grad(Dims{channels, h, w});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double u = upstream.at(c, y, x);
        grad.at(c, a.i0, b.i0) += a.w0 * b.w0 * u;
        grad.at(c, a.i0, b.i1) += a.w0 * b.w1 * u;
        grad.at(c, a.i1, b.i0) += a.w1 * b.w0 * u;
        grad.at(c, a.i1, b.i1) += a.w1 * b.w1 * u;
      }
    }
  }
  return grad;
}

}  // namespace lingm
