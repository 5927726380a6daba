#include "msic/range_coder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "msic/errors.hpp"

namespace msic {
namespace {

constexpr std::uint32_t kTop = 1u << 24;

double upper_tail(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

// log of the standard normal upper tail, accurate far into the tail.
double log_upper_tail(double x) {
  if (x < 30.0) return std::log(upper_tail(x));
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
  return -0.5 * x2 - std::log(x * std::sqrt(2.0 * std::numbers::pi)) + std::log(series);
}

// Probability mass of [v - 0.5, v + 0.5] for v >= 0.
double bin_mass(double v, double sigma) {
  return upper_tail((v - 0.5) / sigma) - upper_tail((v + 0.5) / sigma);
}

}  // namespace

namespace {

// 16-bit frequencies: 1 + round-half-even(p * (2^16 - n)), with the
// rounding surplus or deficit moved to the largest bin.
std::vector<std::uint32_t> quantize(const std::vector<double>& mass) {
  const std::size_t n = mass.size();
  const double spread = static_cast<double>(kFreqTotal - n);
  std::vector<std::uint32_t> freq(n);
  std::int64_t total = 0;
  std::size_t largest = 0;
  for (std::size_t i = 0; i < n; ++i) {
    freq[i] = 1 + static_cast<std::uint32_t>(std::nearbyint(mass[i] * spread));
    total += freq[i];
    if (freq[i] > freq[largest]) largest = i;
  }
  const std::int64_t diff = static_cast<std::int64_t>(kFreqTotal) - total;
  freq[largest] = static_cast<std::uint32_t>(static_cast<std::int64_t>(freq[largest]) + diff);
  return freq;
}

int escape_order_for(double sigma) { return sigma >= 2.0 ? static_cast<int>(std::floor(std::log2(sigma))) : 0; }

}  // namespace

CdfTable CdfTable::gaussian(double sigma) {
  if (!(sigma >= 0.04 && sigma <= 256.0)) {
    throw RangeError("sigma " + std::to_string(sigma) + " outside [0.04, 256]");
  }
  const int k = std::clamp(static_cast<int>(std::ceil(6.0 * sigma)), 1, 128);
  CdfTable t;
  t.lo_ = std::max(-k, kAlphabetMin);
  t.hi_ = std::min(k, kAlphabetMax);
  t.escapes_ = true;
  t.escape_order_ = escape_order_for(sigma);
  t.sigma_ = sigma;
  const std::size_t n = static_cast<std::size_t>(t.hi_ - t.lo_ + 1) + 2;
  t.mass_.resize(n);
  t.mass_[0] = upper_tail((0.5 - t.lo_) / sigma);
  t.mass_[n - 1] = upper_tail((t.hi_ + 0.5) / sigma);
  for (int v = t.lo_; v <= t.hi_; ++v) t.mass_[t.bin_of(v)] = bin_mass(std::abs(v), sigma);

  const std::vector<std::uint32_t> freq = quantize(t.mass_);
  t.cum_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) t.cum_[i + 1] = t.cum_[i] + freq[i];
  return t;
}

std::optional<CdfTable> CdfTable::gaussian_tail(double sigma, int first) {
  const double norm = upper_tail((first - 0.5) / sigma);
  if (!(norm > 1e-290)) return std::nullopt;
  CdfTable t;
  t.lo_ = 0;
  const int bins = std::clamp(static_cast<int>(std::ceil(6.0 * sigma)), 16, 2048);
  t.hi_ = bins - 1;
  t.escapes_ = true;
  t.escape_order_ = escape_order_for(sigma);
  t.sigma_ = sigma;
  const std::size_t n = static_cast<std::size_t>(bins) + 2;
  t.mass_.assign(n, 0.0);
  for (int d = 0; d < bins; ++d) t.mass_[t.bin_of(d)] = bin_mass(first + d, sigma) / norm;
  t.mass_[n - 1] = upper_tail((first + bins - 0.5) / sigma) / norm;
  const std::vector<std::uint32_t> freq = quantize(t.mass_);
  t.cum_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) t.cum_[i + 1] = t.cum_[i] + freq[i];
  return t;
}

CdfTable CdfTable::from_frequencies(int lo, std::vector<std::uint32_t> freqs, bool escapes) {
  const std::size_t extra = escapes ? 2 : 0;
  if (freqs.size() < 1 + extra) throw RangeError("frequency table too small");
  CdfTable t;
  t.lo_ = lo;
  t.hi_ = lo + static_cast<int>(freqs.size() - extra) - 1;
  t.escapes_ = escapes;
  t.cum_.assign(freqs.size() + 1, 0);
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    if (freqs[i] == 0) throw RangeError("zero frequency in table");
    t.cum_[i + 1] = t.cum_[i] + freqs[i];
  }
  if (t.cum_.back() != kFreqTotal) throw RangeError("frequencies must sum to 2^16");
  return t;
}

std::size_t CdfTable::find(std::uint32_t target) const {
  const auto it = std::upper_bound(cum_.begin(), cum_.end(), target);
  return static_cast<std::size_t>(it - cum_.begin()) - 1;
}

// ---------------------------------------------------------------------------

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      // The very first byte is always zero and is not stored.
      if (!first_) out_.push_back(static_cast<std::uint8_t>(temp + carry));
      first_ = false;
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(std::uint32_t start, std::uint32_t size) {
  const std::uint32_t r = range_ >> kFreqBits;
  low_ += static_cast<std::uint64_t>(r) * start;
  // The last interval absorbs the truncation remainder.
  range_ = start + size == kFreqTotal ? range_ - r * start : r * size;
  while (range_ < kTop) {
    range_ <<= 8;
    shift_low();
  }
  ideal_bits_ -= std::log2(static_cast<double>(size) / kFreqTotal);
}

void RangeEncoder::encode_bits(std::uint32_t value, int count) {
  for (int i = count - 1; i >= 0; --i) {
    range_ >>= 1;
    if ((value >> i) & 1u) low_ += range_;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }
  ideal_bits_ += count;
}

void RangeEncoder::encode_symbol(const CdfTable& table, std::int32_t symbol) {
  if (symbol >= table.lo() && symbol <= table.hi()) {
    encode(table.cum(table.bin_of(symbol)), table.freq(table.bin_of(symbol)));
    return;
  }
  if (!table.escapes()) throw RangeError("symbol " + std::to_string(symbol) + " outside table alphabet");
  const bool upper = symbol > table.hi();
  const std::size_t bin = upper ? table.bins() - 1 : 0;
  encode(table.cum(bin), table.freq(bin));
  encode_escape(table, upper,
                upper ? static_cast<std::uint64_t>(static_cast<std::int64_t>(symbol) - table.hi() - 1)
                      : static_cast<std::uint64_t>(static_cast<std::int64_t>(table.lo()) - 1 - symbol));
}

void RangeEncoder::encode_escape(const CdfTable& table, bool upper, std::uint64_t beyond) {
  if (table.sigma() > 0.0) {
    const int first = upper ? table.hi() + 1 : 1 - table.lo();
    if (const auto tail = CdfTable::gaussian_tail(table.sigma(), first)) {
      if (beyond <= static_cast<std::uint64_t>(tail->hi())) {
        const std::size_t bin = tail->bin_of(static_cast<int>(beyond));
        encode(tail->cum(bin), tail->freq(bin));
        return;
      }
      encode(tail->cum(tail->bins() - 1), tail->freq(tail->bins() - 1));
      beyond -= static_cast<std::uint64_t>(tail->hi()) + 1;
    }
  }
  const int k = table.escape_order();
  const std::uint64_t v = beyond + (std::uint64_t{1} << k);
  const int len = static_cast<int>(std::bit_width(v));
  encode_bits(0, len - 1 - k);
  if (len > 32) encode_bits(static_cast<std::uint32_t>(v >> 32), len - 32);
  encode_bits(static_cast<std::uint32_t>(v), std::min(len, 32));
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  // Pick the value in [low, low + range) with the most trailing zero bits so
  // the tail of the stream can be dropped; the decoder pads with zeros.
  const std::uint64_t limit = low_ + range_;
  for (int k = 32; k >= 0; --k) {
    const std::uint64_t mask = (std::uint64_t{1} << k) - 1;
    const std::uint64_t v = (low_ + mask) & ~mask;
    if (v >= low_ && v < limit) {
      low_ = v;
      break;
    }
  }
  for (int i = 0; i < 5; ++i) shift_low();
  while (!out_.empty() && out_.back() == 0) out_.pop_back();
  return std::move(out_);
}

// ---------------------------------------------------------------------------

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  const std::uint8_t b = pos_ < in_.size() ? in_[pos_] : 0;
  ++pos_;
  return b;
}

void RangeDecoder::corrupt(const char* what) const {
  std::ostringstream os;
  os << "corrupt range-coded stream: " << what << " at byte " << pos_ << " of " << in_.size()
     << " (after " << symbols_ << " symbols)";
  throw FormatError(os.str());
}

void RangeDecoder::normalize() {
  while (range_ < kTop) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

std::size_t RangeDecoder::decode_bin(const CdfTable& table) {
  if (code_ >= range_) corrupt("code outside range");
  const std::uint32_t r = range_ >> kFreqBits;
  const std::uint32_t target = std::min<std::uint32_t>(code_ / r, kFreqTotal - 1);
  const std::size_t bin = table.find(target);
  const std::uint32_t start = table.cum(bin);
  const std::uint32_t size = table.freq(bin);
  code_ -= r * start;
  range_ = start + size == kFreqTotal ? range_ - r * start : r * size;
  normalize();
  return bin;
}

std::int32_t RangeDecoder::decode_symbol(const CdfTable& table) {
  const std::size_t bin = decode_bin(table);
  ++symbols_;
  if (!table.escapes()) return table.lo() + static_cast<std::int32_t>(bin);
  if (bin != 0 && bin != table.bins() - 1) return table.lo() + static_cast<std::int32_t>(bin) - 1;
  const bool upper = bin != 0;
  const auto beyond = static_cast<std::int64_t>(decode_escape(table, upper));
  const std::int64_t symbol = upper ? table.hi() + 1 + beyond : table.lo() - 1 - beyond;
  if (symbol < INT32_MIN || symbol > INT32_MAX) corrupt("escaped symbol out of range");
  return static_cast<std::int32_t>(symbol);
}

std::uint64_t RangeDecoder::decode_escape(const CdfTable& table, bool upper) {
  std::uint64_t base = 0;
  if (table.sigma() > 0.0) {
    const int first = upper ? table.hi() + 1 : 1 - table.lo();
    if (const auto tail = CdfTable::gaussian_tail(table.sigma(), first)) {
      const std::size_t bin = decode_bin(*tail);
      if (bin == 0) corrupt("unused tail escape");
      if (bin != tail->bins() - 1) return bin - 1;
      base = static_cast<std::uint64_t>(tail->hi()) + 1;
    }
  }
  int zeros = 0;
  while (decode_bits(1) == 0) {
    if (++zeros > 32) corrupt("Exp-Golomb prefix too long");
  }
  const int len = zeros + table.escape_order();
  std::uint64_t v = std::uint64_t{1} << len;
  if (len > 32) v |= static_cast<std::uint64_t>(decode_bits(len - 32)) << 32;
  v |= decode_bits(std::min(len, 32));
  return base + v - (std::uint64_t{1} << table.escape_order());
}

std::uint32_t RangeDecoder::decode_bits(int count) {
  std::uint32_t v = 0;
  for (int i = 0; i < count; ++i) {
    if (code_ >= range_) corrupt("code outside range");
    range_ >>= 1;
    std::uint32_t bit = 0;
    if (code_ >= range_) {
      code_ -= range_;
      bit = 1;
    }
    v = (v << 1) | bit;
    normalize();
  }
  return v;
}

// ---------------------------------------------------------------------------

double gaussian_symbol_bits(std::int64_t symbol, double sigma) {
  const double a = (static_cast<double>(std::llabs(symbol)) - 0.5) / sigma;
  const double b = (static_cast<double>(std::llabs(symbol)) + 0.5) / sigma;
  double log_p;
  if (a <= 0.0) {
    log_p = std::log(upper_tail(a) - upper_tail(b));
  } else {
    const double la = log_upper_tail(a);
    const double lb = log_upper_tail(b);
    log_p = la + std::log1p(-std::exp(lb - la));
  }
  return -log_p / std::numbers::ln2;
}

}  // namespace msic
