#include "binary_io.hpp"

#include <fstream>
#include <iterator>

#include <zlib.h>

namespace tide {

const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::Io: return "io error";
    case FormatErrorKind::BadMagic: return "bad magic";
    case FormatErrorKind::VersionMismatch: return "version mismatch";
    case FormatErrorKind::Truncated: return "truncated file";
    case FormatErrorKind::DimensionMismatch: return "dimension mismatch";
    case FormatErrorKind::ChecksumMismatch: return "checksum mismatch";
  }
  return "format error";
}

namespace detail {

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = ::crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + path.string());
}

std::span<const unsigned char> verify_crc(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorKind::Truncated, "missing checksum");
  auto payload = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32(payload);
  if (stored != actual) {
    throw FormatError(FormatErrorKind::ChecksumMismatch, "stored crc does not match contents");
  }
  return payload;
}

}  // namespace detail
}  // namespace tide
