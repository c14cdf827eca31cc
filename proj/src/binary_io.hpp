#pragma once

// Little-endian byte buffers shared by the binary containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tide/format.hpp"

namespace tide::detail {

std::uint32_t crc32(std::span<const unsigned char> bytes);

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }
  void raw(std::span<const unsigned char> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void tag(const char (&magic)[5]) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(magic[i]));
  }

  // Appends the CRC32 of everything written so far.
  void seal() { u32(crc32(bytes_)); }

  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    for (float& v : out) v = f32();
  }
  std::span<const unsigned char> take(std::size_t n) {
    if (n > remaining()) {
      throw FormatError(FormatErrorKind::Truncated,
                        "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                            ", " + std::to_string(remaining()) + " left");
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);

// Verifies the trailing CRC32 and returns the payload in front of it.
std::span<const unsigned char> verify_crc(std::span<const unsigned char> bytes);

}  // namespace tide::detail
