#pragma once

// Little-endian binary file helpers shared by the NDLW/NDLV/NDLA containers.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ndl/errors.hpp"

namespace ndl::binio {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

inline std::uint64_t fnv1a_str(const std::string& s) {
  std::uint64_t h = kFnvOffset;
  fnv1a(h, s.data(), s.size());
  return h;
}

// Writer that maintains a rolling FNV-1a hash of everything written through
// it (used for trailing payload checksums).
class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : os_(path, std::ios::binary), path_(path.string()) {
    if (!os_) throw DataError("cannot open " + path_ + " for writing");
  }

  void raw(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    fnv1a(hash_, data, n);
  }

  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    u64(v);
  }
  void str16(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }

  std::uint64_t hash() const { return hash_; }
  void reset_hash() { hash_ = kFnvOffset; }

  void close() {
    os_.close();
    if (!os_) throw DataError("short write on " + path_);
  }

 private:
  void put_le(std::uint64_t v, int bytes) {
    unsigned char b[8];
    for (int i = 0; i < bytes; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    raw(b, static_cast<std::size_t>(bytes));
  }

  std::ofstream os_;
  std::string path_;
  std::uint64_t hash_ = kFnvOffset;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : is_(path, std::ios::binary), path_(path.string()) {
    if (!is_) throw DataError("cannot open " + path_ + " for reading");
  }

  void raw(void* data, std::size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is_) throw FormatError("truncated file: " + path_);
    fnv1a(hash_, data, n);
  }

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str16() {
    const std::uint16_t n = u16();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  std::uint64_t hash() const { return hash_; }
  void reset_hash() { hash_ = kFnvOffset; }
  const std::string& path() const { return path_; }

 private:
  std::uint64_t get_le(int bytes) {
    unsigned char b[8];
    raw(b, static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::ifstream is_;
  std::string path_;
  std::uint64_t hash_ = kFnvOffset;
};

}  // namespace ndl::binio
