#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "phaseflow/error.hpp"

namespace phaseflow::detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f32(std::ostream& os, std::span<const float> values) {
  std::string buf(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// Reads exactly n bytes or throws FormatError(kTruncated).
inline void read_exact(std::istream& is, char* out, std::size_t n, const char* what) {
  is.read(out, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError(FormatErrorKind::kTruncated, std::string("truncated payload: ") + what);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline void read_f32(std::istream& is, std::span<float> out, const char* what) {
  std::string buf(out.size() * 4, '\0');
  read_exact(is, buf.data(), buf.size(), what);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k)
      bits |= std::uint32_t(static_cast<unsigned char>(buf[i * 4 + k])) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
}

inline std::string read_string(std::istream& is, const char* what, std::uint32_t max_len = 1u << 24) {
  const std::uint32_t n = read_u32(is, what);
  if (n > max_len) throw FormatError(FormatErrorKind::kInconsistentHeader, std::string("implausible length for ") + what);
  std::string s(n, '\0');
  read_exact(is, s.data(), n, what);
  return s;
}

}  // namespace phaseflow::detail
