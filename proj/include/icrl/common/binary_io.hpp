#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace icrl::io {

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Version, Truncated, Checksum, Invalid };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    uInt chunk = n > 0x40000000u ? 0x40000000u : uInt(n);
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return std::uint32_t(c);
}

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(std::string_view s) {
    u32(std::uint32_t(s.size()));
    raw(s.data(), s.size());
  }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  /// CRC32 of everything written since byte offset `from`.
  std::uint32_t crc_since(std::size_t from) const { return crc32_of(buf_.data() + from, buf_.size() - from); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source with truncation checks.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf, std::string source = "input")
      : buf_(std::move(buf)), source_(std::move(source)) {}

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::uint32_t crc_range(std::size_t from, std::size_t to) const { return crc32_of(buf_.data() + from, to - from); }

  /// Reads a magic of the form <prefix><version digit>.
  void expect_magic(std::string_view prefix, char version) {
    std::string got(prefix.size() + 1, '\0');
    if (remaining() < got.size()) {
      throw FormatError(FormatError::Kind::Truncated, source_ + ": too short for a header");
    }
    raw(got.data(), got.size());
    if (std::string_view(got).substr(0, prefix.size()) != prefix) {
      throw FormatError(FormatError::Kind::BadMagic, source_ + ": bad magic, expected " + std::string(prefix) + version);
    }
    if (got.back() != version) {
      throw FormatError(FormatError::Kind::Version, source_ + ": unsupported version '" + std::string(1, got.back()) +
                                                        "', expected '" + std::string(1, version) + "'");
    }
  }

  /// Checks a checksum stored in the last four bytes over [from, size - 4)
  /// without moving the cursor, so a payload can be trusted before parsing.
  void expect_tail_crc(std::size_t from) const {
    if (buf_.size() < from + 4) {
      throw FormatError(FormatError::Kind::Truncated, source_ + ": too short for a checksum");
    }
    const std::size_t end = buf_.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf_[end + std::size_t(i)]) << (8 * i);
    if (stored != crc_range(from, end)) {
      throw FormatError(FormatError::Kind::Checksum, source_ + ": checksum mismatch over payload");
    }
  }

  void expect_crc(std::size_t from) {
    std::size_t end = pos_;
    std::uint32_t stored = u32();
    if (stored != crc_range(from, end)) {
      throw FormatError(FormatError::Kind::Checksum, source_ + ": checksum mismatch at byte " + std::to_string(end));
    }
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::Truncated, source_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  std::vector<std::uint8_t> buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace icrl::io
