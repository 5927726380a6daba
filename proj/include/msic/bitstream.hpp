#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace msic {

inline constexpr std::uint16_t kBitstreamVersion = 1;

// Self-describing compressed image: fixed header followed by one
// range-coded chunk per latent scale (scale 1 first). Layout in
// docs/bitstream.md.
struct Bitstream {
  std::uint16_t version = kBitstreamVersion;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t padded_width = 0;
  std::uint32_t padded_height = 0;
  std::uint32_t quality = 0;  // 16.16 fixed point
  std::uint64_t config_hash = 0;
  std::vector<std::uint32_t> symbol_crc;  // CRC-32 of each scale's symbols
  std::vector<std::vector<std::uint8_t>> chunks;

  std::vector<std::uint8_t> serialize() const;
  // Throws FormatError on malformed input.
  static Bitstream parse(std::span<const std::uint8_t> bytes);

  std::size_t header_bytes() const;
  std::size_t total_bytes() const;
};

std::uint32_t quality_to_fixed(double q);
double quality_from_fixed(std::uint32_t fixed);

// CRC-32 of the symbols serialized as little-endian 32-bit integers.
std::uint32_t symbol_crc32(std::span<const std::int32_t> symbols);

}  // namespace msic
