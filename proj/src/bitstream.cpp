#include "msic/bitstream.hpp"

#include <zlib.h>

#include <cmath>
#include <string>

#include "msic/errors.hpp"

namespace msic {
namespace {

constexpr char kMagic[4] = {'M', 'S', 'I', 'C'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
  template <typename U>
  U get(const char* field) {
    if (pos + sizeof(U) > bytes.size()) {
      throw FormatError(std::string("bitstream truncated in field ") + field + " at byte " +
                        std::to_string(pos));
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

}  // namespace

std::size_t Bitstream::header_bytes() const { return 4 + 2 + 2 + 4 * 5 + 8 + 8 * chunks.size(); }

std::size_t Bitstream::total_bytes() const {
  std::size_t n = header_bytes();
  for (const auto& c : chunks) n += c.size();
  return n;
}

std::vector<std::uint8_t> Bitstream::serialize() const {
  if (symbol_crc.size() != chunks.size()) throw FormatError("one checksum per chunk required");
  Writer w;
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(version);
  w.put(static_cast<std::uint16_t>(chunks.size()));
  w.put(width);
  w.put(height);
  w.put(padded_width);
  w.put(padded_height);
  w.put(quality);
  w.put(config_hash);
  for (const auto& c : chunks) w.put(static_cast<std::uint32_t>(c.size()));
  for (std::uint32_t crc : symbol_crc) w.put(crc);
  for (const auto& c : chunks) w.out.insert(w.out.end(), c.begin(), c.end());
  return std::move(w.out);
}

Bitstream Bitstream::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.get<std::uint8_t>("magic") != static_cast<std::uint8_t>(c)) throw FormatError("not an MSIC bitstream");
  }
  Bitstream b;
  b.version = r.get<std::uint16_t>("version");
  if (b.version != kBitstreamVersion) {
    throw FormatError("unsupported bitstream version " + std::to_string(b.version));
  }
  const std::uint16_t scales = r.get<std::uint16_t>("scale count");
  if (scales == 0 || scales > 16) throw FormatError("implausible scale count " + std::to_string(scales));
  b.width = r.get<std::uint32_t>("width");
  b.height = r.get<std::uint32_t>("height");
  b.padded_width = r.get<std::uint32_t>("padded width");
  b.padded_height = r.get<std::uint32_t>("padded height");
  b.quality = r.get<std::uint32_t>("quality");
  b.config_hash = r.get<std::uint64_t>("config hash");
  if (b.width == 0 || b.height == 0 || b.padded_width < b.width || b.padded_height < b.height ||
      b.padded_width - b.width >= 64 || b.padded_height - b.height >= 64) {
    throw FormatError("inconsistent image dimensions in bitstream header");
  }
  std::vector<std::uint32_t> lengths(scales);
  for (auto& l : lengths) l = r.get<std::uint32_t>("chunk length");
  b.symbol_crc.resize(scales);
  for (auto& c : b.symbol_crc) c = r.get<std::uint32_t>("symbol checksum");
  for (std::uint32_t l : lengths) {
    if (r.pos + l > bytes.size()) {
      throw FormatError("chunk of " + std::to_string(l) + " bytes overruns the stream at byte " +
                        std::to_string(r.pos));
    }
    b.chunks.emplace_back(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                          bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + l));
    r.pos += l;
  }
  if (r.pos != bytes.size()) {
    throw FormatError(std::to_string(bytes.size() - r.pos) + " trailing bytes after the last chunk");
  }
  return b;
}

std::uint32_t quality_to_fixed(double q) {
  if (!(q >= 0.0 && q < 65536.0)) throw RangeError("quality not representable in 16.16");
  return static_cast<std::uint32_t>(std::lround(q * 65536.0));
}

double quality_from_fixed(std::uint32_t fixed) { return fixed / 65536.0; }

std::uint32_t symbol_crc32(std::span<const std::int32_t> symbols) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(symbols.size() * 4);
  for (std::int32_t s : symbols) {
    const auto u = static_cast<std::uint32_t>(s);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes 32-bit lengths; feed in pieces.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace msic
