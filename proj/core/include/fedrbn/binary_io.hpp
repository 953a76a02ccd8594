#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "fedrbn/errors.hpp"

// Little-endian primitive IO shared by every binary record format.
namespace fedrbn::binio {

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  os.write(bytes.data(), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw FormatError("unexpected end of binary record");
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void write_f64s(std::ostream& os, std::span<const double> values) {
  for (double v : values) write_le(os, v);
}

inline std::vector<double> read_f64s(std::istream& is, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = read_le<double>(is);
  return out;
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::vector<char> got(magic.size());
  if (!is.read(got.data(), got.size()) || std::string_view(got.data(), got.size()) != magic)
    throw FormatError("bad magic, expected '" + std::string(magic) + "'");
}

}  // namespace fedrbn::binio
