#pragma once

// NDT1 binary tensor container:
//   "NDT1" | dtype u8 (1 = f64 LE, 3 = u32 LE) | ndim u8 | 2 zero bytes |
//   ndim x u64 LE dims | row-major payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lingm/tensor.hpp"

namespace lingm::ndt {

enum class DType : std::uint8_t { Float64 = 1, UInt32 = 3 };

static_assert(std::endian::native == std::endian::little, "NDT I/O assumes a little-endian host");

namespace detail {

inline void write_header(std::ostream& os, DType dtype, const Dims& dims) {
  if (dims.size() > 255) throw ShapeError("ndt: too many dimensions");
  const char magic[4] = {'N', 'D', 'T', '1'};
  os.write(magic, 4);
  const std::array<std::uint8_t, 4> head{static_cast<std::uint8_t>(dtype), static_cast<std::uint8_t>(dims.size()), 0, 0};
  os.write(reinterpret_cast<const char*>(head.data()), 4);
  for (std::size_t d : dims) {
    const std::uint64_t v = d;
    os.write(reinterpret_cast<const char*>(&v), 8);
  }
}

struct Header {
  DType dtype;
  Dims dims;
};

inline Header read_header(std::istream& is, const std::string& name) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NDT1", 4) != 0) throw FormatError(name + ": bad NDT magic");
  std::array<std::uint8_t, 4> head{};
  is.read(reinterpret_cast<char*>(head.data()), 4);
  if (!is) throw FormatError(name + ": truncated NDT header");
  if (head[0] != 1 && head[0] != 3) throw FormatError(name + ": unknown NDT dtype code " + std::to_string(head[0]));
  if (head[2] != 0 || head[3] != 0) throw FormatError(name + ": nonzero NDT padding");
  Header h{static_cast<DType>(head[0]), {}};
  for (std::uint8_t i = 0; i < head[1]; ++i) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw FormatError(name + ": truncated NDT dims");
    if (v == 0) throw FormatError(name + ": zero-length NDT dimension");
    h.dims.push_back(static_cast<std::size_t>(v));
  }
  return h;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open for reading");
  return is;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  return os;
}

template <class T>
void read_payload(std::istream& is, std::vector<T>& out, const std::string& name) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(T)));
  if (!is) throw FormatError(name + ": truncated NDT payload");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(name + ": trailing bytes after NDT payload");
}

}  // namespace detail

inline void write_f64(const std::filesystem::path& path, const Tensor& t) {
  auto os = detail::open_out(path);
  detail::write_header(os, DType::Float64, t.dims());
  os.write(reinterpret_cast<const char*>(t.storage().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw IoError(path.string() + ": write failed");
}

inline void write_u32(const std::filesystem::path& path, const std::vector<std::uint32_t>& values, Dims dims = {}) {
  if (dims.empty()) dims = {values.size()};
  if (dims_product(dims) != values.size()) throw ShapeError("ndt: u32 dims do not match value count");
  auto os = detail::open_out(path);
  detail::write_header(os, DType::UInt32, dims);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(std::uint32_t)));
  if (!os) throw IoError(path.string() + ": write failed");
}

inline Tensor read_f64(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  const std::string name = path.string();
  auto h = detail::read_header(is, name);
  if (h.dtype != DType::Float64) throw FormatError(name + ": expected float64 NDT");
  std::vector<double> data(dims_product(h.dims));
  detail::read_payload(is, data, name);
  Tensor t(std::move(h.dims), std::move(data));
  require_finite(t, name.c_str());
  return t;
}

struct U32Array {
  Dims dims;
  std::vector<std::uint32_t> values;
};

inline U32Array read_u32(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  const std::string name = path.string();
  auto h = detail::read_header(is, name);
  if (h.dtype != DType::UInt32) throw FormatError(name + ": expected uint32 NDT");
  U32Array out{h.dims, std::vector<std::uint32_t>(dims_product(h.dims))};
  detail::read_payload(is, out.values, name);
  return out;
}

}  // namespace lingm::ndt
