#pragma once

// Little-endian readers/writers shared by the .causefeat/.causebook/.causehead
// and label payload formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace cause::detail {

template <class T>
T byteswap_if_big(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class LeWriter {
 public:
  explicit LeWriter(std::ostream& os) : os_(os) {}

  template <class T>
  void put(T v) {
    v = byteswap_if_big(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <class T>
  void put_array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
      os_.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size_bytes()));
    } else {
      for (const T& v : values) put(v);
    }
  }
  void put_bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  bool ok() const { return static_cast<bool>(os_); }

 private:
  std::ostream& os_;
};

/// Reader that reports short reads through `ok()` instead of throwing, so each
/// format can raise its own "truncated" error.
class LeReader {
 public:
  explicit LeReader(std::istream& is) : is_(is) {}

  template <class T>
  bool get(T& v) {
    if (!is_.read(reinterpret_cast<char*>(&v), sizeof(T))) return false;
    v = byteswap_if_big(v);
    return true;
  }
  template <class T>
  bool get_array(std::vector<T>& out, std::size_t n) {
    out.resize(n);
    if (!is_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(T)))) {
      return false;
    }
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      for (auto& v : out) v = byteswap_if_big(v);
    }
    return true;
  }
  bool get_bytes(char* p, std::size_t n) {
    return static_cast<bool>(is_.read(p, static_cast<std::streamsize>(n)));
  }
  bool get_string(std::string& s, std::uint32_t max_len = 1u << 20) {
    std::uint32_t n = 0;
    if (!get(n) || n > max_len) return false;
    s.resize(n);
    return get_bytes(s.data(), n);
  }
  bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
};

}  // namespace cause::detail
