#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace msic {

inline constexpr int kFreqBits = 16;
inline constexpr std::uint32_t kFreqTotal = 1u << kFreqBits;
inline constexpr int kAlphabetMin = -128;
inline constexpr int kAlphabetMax = 127;

// Quantized cumulative frequencies over the integer symbols [lo, hi], with
// optional escape bins below lo and above hi. Bin 0 is the low escape when
// escapes are enabled.
class CdfTable {
 public:
  // Discretized zero-mean Gaussian with scale `sigma`, alphabet
  // [-K, K] intersected with [kAlphabetMin, kAlphabetMax] where
  // K = clamp(ceil(6 sigma), 1, 128); tail mass goes to the escape bins.
  // Throws RangeError unless sigma is in [0.04, 256].
  static CdfTable gaussian(double sigma);
  // Table from explicit positive frequencies summing to kFreqTotal, one per
  // bin (escape bins first and last when `escapes` is set).
  static CdfTable from_frequencies(int lo, std::vector<std::uint32_t> freqs, bool escapes);
  // Conditional law of d = |v| - first given |v| >= first under N(0, sigma^2),
  // over d in [0, clamp(ceil(6 sigma), 16, 2048)) plus a high escape bin. Empty when the tail
  // mass underflows double precision.
  static std::optional<CdfTable> gaussian_tail(double sigma, int first);

  int lo() const { return lo_; }
  int hi() const { return hi_; }
  bool escapes() const { return escapes_; }
  // Order k of the Exp-Golomb code for escaped magnitudes: floor(log2 sigma)
  // for Gaussian tables with sigma >= 2, else 0.
  int escape_order() const { return escape_order_; }
  // Scale of a Gaussian table, 0 for explicit frequency tables.
  double sigma() const { return sigma_; }
  std::size_t bins() const { return cum_.size() - 1; }
  std::uint32_t cum(std::size_t bin) const { return cum_[bin]; }
  std::uint32_t freq(std::size_t bin) const { return cum_[bin + 1] - cum_[bin]; }
  // Unquantized bin probabilities (Gaussian tables only).
  const std::vector<double>& masses() const { return mass_; }

  // Bin of an in-alphabet symbol.
  std::size_t bin_of(int symbol) const { return static_cast<std::size_t>(symbol - lo_) + (escapes_ ? 1 : 0); }
  // Bin whose interval contains `target` (< kFreqTotal).
  std::size_t find(std::uint32_t target) const;

 private:
  int lo_ = 0;
  int hi_ = 0;
  bool escapes_ = false;
  int escape_order_ = 0;
  double sigma_ = 0.0;
  std::vector<std::uint32_t> cum_;
  std::vector<double> mass_;
};

// Bytewise range coder with a 64-bit low / 32-bit range state and carry
// propagation through a cached byte.
class RangeEncoder {
 public:
  void encode(std::uint32_t start, std::uint32_t size);
  // `count` raw bits of `value`, most significant first (count <= 32).
  void encode_bits(std::uint32_t value, int count);
  // Escaped symbols are sent as the escape bin followed by their distance
  // beyond the alphabet edge: coded with the Gaussian tail table when the
  // table has one, and as an Exp-Golomb code of order table.escape_order()
  // when the tail table escapes too or does not exist.
  void encode_symbol(const CdfTable& table, std::int32_t symbol);
  std::vector<std::uint8_t> finish();

  // Ideal cost of everything coded so far: -log2(size / total) per
  // interval plus one bit per raw bit.
  double ideal_bits() const { return ideal_bits_; }

 private:
  void shift_low();
  void encode_escape(const CdfTable& table, bool upper, std::uint64_t beyond);

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  bool first_ = true;
  std::vector<std::uint8_t> out_;
  double ideal_bits_ = 0.0;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  std::int32_t decode_symbol(const CdfTable& table);
  std::uint32_t decode_bits(int count);

  // Bytes consumed so far, including implicit zero padding past the end.
  std::size_t position() const { return pos_; }
  std::uint64_t symbols_decoded() const { return symbols_; }

 private:
  std::size_t decode_bin(const CdfTable& table);
  std::uint64_t decode_escape(const CdfTable& table, bool upper);
  std::uint8_t next_byte();
  void normalize();
  [[noreturn]] void corrupt(const char* what) const;

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint64_t symbols_ = 0;
};

// -log2 of the discretized Gaussian probability of `symbol` under
// N(0, sigma^2), evaluated in double with asymptotic tails.
double gaussian_symbol_bits(std::int64_t symbol, double sigma);

}  // namespace msic
