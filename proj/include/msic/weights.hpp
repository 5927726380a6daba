#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msic/tensor.hpp"

namespace msic {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

// Little-endian container of named tensors; see docs/bitstream.md.
class WeightsFile {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::kF32;
    Shape shape;
    std::vector<std::uint8_t> raw;
  };

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t);
  void add_text(const std::string& name, const std::string& text);

  bool contains(const std::string& name) const;
  // Converts between f32 and f64 storage if needed.
  template <typename T>
  Tensor<T> tensor(const std::string& name) const;
  std::string text(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static WeightsFile parse(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static WeightsFile load(const std::string& path);

 private:
  const Entry& find(const std::string& name) const;
  void push(Entry e);
  std::vector<Entry> entries_;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace msic
