#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim::bytes {

// Little-endian encoder into an in-memory buffer.
class Writer {
 public:
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename UInt>
  void u(UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
      buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void u8(std::uint8_t v) { u(v); }
  void u16(std::uint16_t v) { u(v); }
  void u32(std::uint32_t v) { u(v); }
  void u64(std::uint64_t v) { u(v); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  const std::vector<char>& buffer() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

// Little-endian decoder. Every read checks bounds and reports the offset of
// the field it failed on.
class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(std::string("truncated payload reading ") + what + ": need " +
                            std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left",
                        pos_);
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  template <typename UInt>
  UInt u(const char* what) {
    need(sizeof(UInt), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(UInt);
    return static_cast<UInt>(v);
  }
  std::uint8_t u8(const char* what) { return u<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return u<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return u<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return u<std::uint64_t>(what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  void skip(std::size_t n) { pos_ += n; }
  const char* data() const noexcept { return buf_.data() + pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace fedsim::bytes
