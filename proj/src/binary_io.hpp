#pragma once

// Little-endian byte encoding shared by the EDG1/EDR1/EDGM file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eegdg/errors.hpp"

namespace eegdg::io {

class ByteWriter {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError("bad magic, expected \"" + std::string(m) + "\"", pos_);
    }
    pos_ += m.size();
  }
  std::uint32_t u32(const char* what = "u32") {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what = "u64") {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what = "f64") { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what = "string") {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  // Reads `count` f64 values after checking the whole payload is present.
  std::vector<double> f64_array(std::size_t count, const char* what) {
    if (count > remaining() / 8) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(count) +
                            " values, " + std::to_string(remaining() / 8) + " present",
                        pos_);
    }
    std::vector<double> out(count);
    for (double& v : out) v = f64(what);
    return out;
  }
  void expect_end() {
    if (pos_ != bytes_.size()) {
      throw FormatError(std::to_string(bytes_.size() - pos_) + " trailing bytes", pos_);
    }
  }

 private:
  void need(std::size_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);

}  // namespace eegdg::io
