#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lingm/tensor.hpp"

namespace lingm {

inline std::uint8_t quantize_255(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
}

/// Writes a [3, H, W] image with values in [0, 1] as binary P6, maxval 255.
inline void export_ppm(const Tensor& img, const std::filesystem::path& path) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("export_ppm: expected [3, H, W], got " + dims_string(img.dims()));
  require_finite(img, "export_ppm");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> buf(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[(y * w + x) * 3 + c] = quantize_255(img.at(c, y, x));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError(path.string() + ": write failed");
}

namespace detail {

inline std::size_t ppm_header_int(std::istream& is, const std::string& name) {
  // Skips whitespace and '#' comments before each header token.
  for (;;) {
    int ch = is.peek();
    if (ch == '#') {
      std::string discard;
      std::getline(is, discard);
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      is.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(is >> v)) throw FormatError(name + ": malformed PPM header");
  return v;
}

}  // namespace detail

/// Reads a binary P6 file (maxval 255) into a [3, H, W] tensor in [0, 1].
inline Tensor import_ppm(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(name + ": cannot open for reading");
  char magic[2] = {};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || magic[1] != '6') throw FormatError(name + ": not a binary P6 PPM");
  const std::size_t w = detail::ppm_header_int(is, name);
  const std::size_t h = detail::ppm_header_int(is, name);
  const std::size_t maxval = detail::ppm_header_int(is, name);
  if (w == 0 || h == 0) throw FormatError(name + ": empty PPM");
  if (maxval != 255) throw FormatError(name + ": only maxval 255 is supported");
  is.get();  // single whitespace after maxval
  std::vector<std::uint8_t> buf(3 * h * w);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw FormatError(name + ": truncated PPM payload");
  Tensor img(Dims{3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * w + x) * 3 + c] / 255.0;
  return img;
}

}  // namespace lingm
