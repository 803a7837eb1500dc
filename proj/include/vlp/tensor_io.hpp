#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "vlp/error.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

// Tensor dump format:
//
//   {"count":6,"dtype":"f64le","shape":[2,3]}\n
//   <count × 8 bytes, IEEE-754 binary64, little-endian, row-major>
//
// The header is a single JSON line. Reading back yields bit-identical values.

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  nlohmann::json header = {{"shape", t.shape()}, {"count", t.numel()}, {"dtype", "f64le"}};
  os << header.dump() << '\n';
  for (double v : t.data()) {
    const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    os.write(bytes, 8);
  }
  if (!os) throw IoError("failed writing tensor payload");
}

inline Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing tensor header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed tensor header: ") + e.what());
  }
  if (!header.contains("shape") || !header.contains("count")) throw IoError("tensor header lacks shape/count");
  if (header.value("dtype", "f64le") != "f64le") throw IoError("unsupported dtype " + header["dtype"].dump());
  const auto shape = header["shape"].get<Shape>();
  const auto count = header["count"].get<std::size_t>();
  if (shape_numel(shape) != count) throw IoError("tensor header count disagrees with shape");
  std::vector<double> data(count);
  for (std::size_t k = 0; k < count; ++k) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("truncated tensor payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    data[k] = std::bit_cast<double>(detail::to_le(bits));
  }
  return Tensor(shape, std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace vlp
