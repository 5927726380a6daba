#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msic/tensor.hpp"

namespace msic {

// Interleaved 8-bit RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6, maxval 255). Throws FormatError / std::ios_base::failure.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& image);
Image parse_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const Image& image);

// (1, 3, H', W') in [0, 1] with H', W' the next multiples of `multiple`;
// the border is replicated to the right and bottom.
template <typename T>
Tensor<T> image_to_tensor(const Image& image, int multiple);
// Crops to width x height, scales by 255, clamps to [0, 255] and rounds
// half away from zero.
template <typename T>
Image tensor_to_image(const Tensor<T>& t, int width, int height);

int round_up(int v, int multiple);

// 8-bit RGB PSNR; identical images report 99 dB.
double psnr(const Image& a, const Image& b);

}  // namespace msic
