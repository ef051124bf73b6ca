#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

#include "mflab/errors.hpp"

namespace mflab::detail {

// FNV-1a over a byte range.
inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Native-endian packed writer; the content hash is appended on finish().
class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

  void finish(const std::string& path) {
    std::uint64_t h = fnv1a(buf_.data(), buf_.size());
    put(h);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptContainer("cannot open '" + path + "'");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (buf_.size() < sizeof(std::uint64_t)) throw CorruptContainer("'" + path + "' is truncated");
    std::size_t body = buf_.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, buf_.data() + body, sizeof stored);
    if (fnv1a(buf_.data(), body) != stored) throw CorruptContainer("'" + path + "' failed its content hash");
    end_ = body;
  }

  template <class T>
  T get() {
    T v;
    get_bytes(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  void get_bytes(char* p, std::size_t n) {
    if (pos_ + n > end_) throw CorruptContainer("container payload is shorter than its header claims");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  void expect_magic(const char (&magic)[9]) {
    char m[8];
    get_bytes(m, 8);
    if (std::memcmp(m, magic, 8) != 0) throw CorruptContainer("bad container magic");
  }
  bool at_end() const { return pos_ == end_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

}  // namespace mflab::detail
