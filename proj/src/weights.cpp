#include "msic/weights.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <bit>
#include <set>

namespace msic {
namespace {

constexpr char kMagic[4] = {'M', 'S', 'I', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t& pos) {
  if (pos + 4 > b.size()) throw FormatError("weights file truncated at byte " + std::to_string(pos));
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  throw FormatError("unknown dtype");
}

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::kF32 : DType::kF64;
}

// Scalars are stored little-endian; the host is assumed little-endian too
// (checked at compile time).
static_assert(std::endian::native == std::endian::little, "little-endian host required");

}  // namespace

void WeightsFile::push(Entry e) {
  for (const auto& x : entries_) {
    if (x.name == e.name) throw FormatError("duplicate weights entry '" + e.name + "'");
  }
  entries_.push_back(std::move(e));
}

template <typename T>
void WeightsFile::add(const std::string& name, const Tensor<T>& t) {
  Entry e;
  e.name = name;
  e.dtype = dtype_of<T>();
  e.shape = t.shape();
  e.raw.resize(t.numel() * sizeof(T));
  if (!e.raw.empty()) std::memcpy(e.raw.data(), t.data(), e.raw.size());
  push(std::move(e));
}

void WeightsFile::add_text(const std::string& name, const std::string& text) {
  Entry e;
  e.name = name;
  e.dtype = DType::kU8;
  e.shape = Shape{1, 1, 1, static_cast<int>(text.size())};
  e.raw.assign(text.begin(), text.end());
  push(std::move(e));
}

bool WeightsFile::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const WeightsFile::Entry& WeightsFile::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw FormatError("weights entry '" + name + "' not found");
}

template <typename T>
Tensor<T> WeightsFile::tensor(const std::string& name) const {
  const Entry& e = find(name);
  const std::size_t n = e.shape.numel();
  if (e.dtype == DType::kF32) {
    std::vector<float> v(n);
    if (n) std::memcpy(v.data(), e.raw.data(), n * 4);
    return Tensor<T>(e.shape, std::vector<T>(v.begin(), v.end()));
  }
  if (e.dtype == DType::kF64) {
    std::vector<double> v(n);
    if (n) std::memcpy(v.data(), e.raw.data(), n * 8);
    return Tensor<T>(e.shape, std::vector<T>(v.begin(), v.end()));
  }
  throw FormatError("weights entry '" + name + "' is not numeric");
}

std::string WeightsFile::text(const std::string& name) const {
  const Entry& e = find(name);
  if (e.dtype != DType::kU8) throw FormatError("weights entry '" + name + "' is not text");
  return std::string(e.raw.begin(), e.raw.end());
}

std::vector<std::uint8_t> WeightsFile::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    for (int d : {e.shape.n, e.shape.c, e.shape.h, e.shape.w}) put_u32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), e.raw.begin(), e.raw.end());
  }
  return out;
}

WeightsFile WeightsFile::parse(std::span<const std::uint8_t> b) {
  if (b.size() < 12 || std::memcmp(b.data(), kMagic, 4) != 0) throw FormatError("not an MSIW weights file");
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(b, pos);
  if (version != kVersion) throw FormatError("unsupported weights version " + std::to_string(version));
  const std::uint32_t count = get_u32(b, pos);
  WeightsFile f;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t len = get_u32(b, pos);
    if (pos + len + 1 > b.size()) throw FormatError("weights entry name truncated");
    e.name.assign(reinterpret_cast<const char*>(b.data() + pos), len);
    pos += len;
    const std::uint8_t tag = b[pos++];
    if (tag > 2) throw FormatError("unknown dtype tag " + std::to_string(tag) + " for '" + e.name + "'");
    e.dtype = static_cast<DType>(tag);
    std::uint32_t ext[4];
    for (auto& x : ext) {
      x = get_u32(b, pos);
      if (x > (1u << 28)) throw FormatError("implausible extent in '" + e.name + "'");
    }
    e.shape = Shape{static_cast<int>(ext[0]), static_cast<int>(ext[1]), static_cast<int>(ext[2]),
                    static_cast<int>(ext[3])};
    const std::size_t bytes = e.shape.numel() * dtype_size(e.dtype);
    if (pos + bytes > b.size()) throw FormatError("weights entry '" + e.name + "' truncated");
    e.raw.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                 b.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
    pos += bytes;
    f.push(std::move(e));
  }
  if (pos != b.size()) throw FormatError("trailing bytes in weights file");
  return f;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("write failed for " + path);
}

void WeightsFile::save(const std::string& path) const { write_file(path, serialize()); }

WeightsFile WeightsFile::load(const std::string& path) { return parse(read_file(path)); }

template void WeightsFile::add(const std::string&, const Tensor<float>&);
template void WeightsFile::add(const std::string&, const Tensor<double>&);
template Tensor<float> WeightsFile::tensor(const std::string&) const;
template Tensor<double> WeightsFile::tensor(const std::string&) const;

}  // namespace msic
