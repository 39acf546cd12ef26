#pragma once

// Little-endian primitive encoding shared by the IMGF, CCMM and CCMW formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>

#include "ccm/error.hpp"

namespace ccm::binary {

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  os.write(bytes.data(), bytes.size());
}

inline void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), magic.size()); }

/// Reads fixed-width fields and raises ErrorKind::format with `context` on a short read.
class Reader {
 public:
  Reader(std::istream& is, std::string context) : is_(is), context_(std::move(context)) {}

  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    is_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (is_.gcount() != static_cast<std::streamsize>(magic.size()))
      throw Error(ErrorKind::format, context_ + ": truncated header");
    if (got != magic)
      throw Error(ErrorKind::format, context_ + ": bad magic (expected \"" + std::string(magic) + "\")");
  }

  template <typename U>
  U read_le() {
    std::array<unsigned char, sizeof(U)> bytes{};
    is_.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (is_.gcount() != static_cast<std::streamsize>(bytes.size()))
      throw Error(ErrorKind::format, context_ + ": truncated payload");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
  }

  std::uint8_t u8() { return read_le<std::uint8_t>(); }
  std::uint32_t u32() { return read_le<std::uint32_t>(); }
  std::uint64_t u64() { return read_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(read_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(read_le<std::uint64_t>()); }

  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n))
      throw Error(ErrorKind::format, context_ + ": truncated payload");
    return s;
  }

  /// Bulk little-endian f32 read into `out` (host is assumed little-endian).
  void f32_array(float* out, std::size_t n) {
    static_assert(std::endian::native == std::endian::little);
    const auto nbytes = static_cast<std::streamsize>(n * sizeof(float));
    is_.read(reinterpret_cast<char*>(out), nbytes);
    if (is_.gcount() != nbytes) throw Error(ErrorKind::format, context_ + ": truncated payload");
  }

  const std::string& context() const { return context_; }

 private:
  std::istream& is_;
  std::string context_;
};

inline void write_f32_array(std::ostream& os, const float* data, std::size_t n) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace ccm::binary
