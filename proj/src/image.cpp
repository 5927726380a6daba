#include "msic/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace msic {
namespace {

std::size_t skip_space_and_comments(const std::vector<std::uint8_t>& b, std::size_t i) {
  while (i < b.size()) {
    if (b[i] == '#') {
      while (i < b.size() && b[i] != '\n') ++i;
    } else if (std::isspace(b[i])) {
      ++i;
    } else {
      break;
    }
  }
  return i;
}

long read_number(const std::vector<std::uint8_t>& b, std::size_t& i, const char* what) {
  i = skip_space_and_comments(b, i);
  if (i >= b.size() || !std::isdigit(b[i])) throw FormatError(std::string("PPM header: expected ") + what);
  long v = 0;
  while (i < b.size() && std::isdigit(b[i])) {
    v = v * 10 + (b[i] - '0');
    if (v > (1L << 24)) throw FormatError(std::string("PPM header: ") + what + " too large");
    ++i;
  }
  return v;
}

}  // namespace

int round_up(int v, int multiple) { return (v + multiple - 1) / multiple * multiple; }

Image parse_ppm(const std::vector<std::uint8_t>& b) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw FormatError("not a binary PPM (P6) file");
  std::size_t i = 2;
  const long w = read_number(b, i, "width");
  const long h = read_number(b, i, "height");
  const long maxval = read_number(b, i, "maxval");
  if (w < 1 || h < 1) throw FormatError("PPM dimensions must be positive");
  if (maxval != 255) throw FormatError("only 8-bit PPM (maxval 255) is supported");
  if (i >= b.size() || !std::isspace(b[i])) throw FormatError("PPM header not terminated");
  ++i;
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (b.size() - i < need) throw FormatError("PPM pixel data truncated");
  Image img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(i),
                    b.begin() + static_cast<std::ptrdiff_t>(i + need));
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return parse_ppm(bytes);
}

void write_ppm(const std::string& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("write failed for " + path);
}

template <typename T>
Tensor<T> image_to_tensor(const Image& img, int multiple) {
  const int pw = round_up(img.width, multiple);
  const int ph = round_up(img.height, multiple);
  Tensor<T> t(Shape{1, 3, ph, pw});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) {
        const int sx = std::min(x, img.width - 1);
        const int sy = std::min(y, img.height - 1);
        t.at(0, c, y, x) = static_cast<T>(img.at(sx, sy, c)) / T(255);
      }
  return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int width, int height) {
  const Shape s = t.shape();
  if (s.n != 1 || s.c != 3 || s.h < height || s.w < width) {
    throw ShapeError("cannot crop " + s.str() + " to " + std::to_string(width) + "x" + std::to_string(height));
  }
  Image img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<std::size_t>(width) * height * 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double v = std::clamp(static_cast<double>(t.at(0, c, y, x)) * 255.0, 0.0, 255.0);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::round(v));
      }
  return img;
}

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("psnr needs equal image sizes");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  if (se == 0.0) return 99.0;
  const double mse = se / static_cast<double>(a.pixels.size());
  return std::min(99.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

template Tensor<float> image_to_tensor(const Image&, int);
template Tensor<double> image_to_tensor(const Image&, int);
template Image tensor_to_image(const Tensor<float>&, int, int);
template Image tensor_to_image(const Tensor<double>&, int, int);

}  // namespace msic
