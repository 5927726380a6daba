#include "msic/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "msic/errors.hpp"

namespace msic {

Image synthetic_image(int width, int height, Rng& rng) {
  if (width < 1 || height < 1) throw ShapeError("synthetic image needs positive dimensions");
  struct Wave {
    double fx, fy, phase, amp[3];
  };
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(40.0, 215.0);
    gx[c] = rng.uniform(-80.0, 80.0);
    gy[c] = rng.uniform(-80.0, 80.0);
  }
  std::vector<Wave> waves(static_cast<std::size_t>(rng.uniform_int(1, 3)));
  for (Wave& w : waves) {
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double period = rng.uniform(6.0, 40.0);
    w.fx = std::cos(angle) * 2.0 * std::numbers::pi / period;
    w.fy = std::sin(angle) * 2.0 * std::numbers::pi / period;
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double a = rng.uniform(10.0, 40.0);
    for (double& v : w.amp) v = a * rng.uniform(0.5, 1.0);
  }
  const double noise = rng.uniform(1.0, 6.0);

  Image img{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * 3)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / width - 0.5;
      const double v = static_cast<double>(y) / height - 0.5;
      for (int c = 0; c < 3; ++c) {
        double s = base[c] + gx[c] * u + gy[c] * v;
        for (const Wave& w : waves) s += w.amp[c] * std::sin(w.fx * x + w.fy * y + w.phase);
        s += noise * rng.normal();
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::round(s), 0.0, 255.0));
      }
    }
  return img;
}

std::vector<Image> synthetic_set(int count, int size, std::uint64_t seed) {
  const Rng root = Rng(seed).split("synthetic");
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) {
    Rng r = root.split(static_cast<std::uint64_t>(i));
    out.push_back(synthetic_image(size, size, r));
  }
  return out;
}

Image synthetic_holdout(int width, int height, std::uint64_t seed) {
  Rng r = Rng(seed).split("holdout");
  return synthetic_image(width, height, r);
}

std::vector<NamedImage> load_folder(const std::string& dir, std::vector<std::string>* errors) {
  namespace fs = std::filesystem;
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ppm") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<NamedImage> out;
  for (const auto& p : paths) {
    try {
      out.push_back({p.filename().string(), read_ppm(p.string())});
    } catch (const std::exception& e) {
      if (errors) errors->push_back(p.filename().string() + ": " + e.what());
    }
  }
  return out;
}

template <typename T>
Tensor<T> random_crops(const std::vector<Image>& images, int count, int size, Rng& rng) {
  if (images.empty()) throw ShapeError("random_crops: no images");
  Tensor<T> out(Shape{count, 3, size, size});
  for (int n = 0; n < count; ++n) {
    const Image& img = images[static_cast<std::size_t>(n) % images.size()];
    if (img.width < size || img.height < size) {
      throw ShapeError("image of " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                       " is smaller than the " + std::to_string(size) + " crop");
    }
    const int x0 = rng.uniform_int(0, img.width - size);
    const int y0 = rng.uniform_int(0, img.height - size);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out.at(n, c, y, x) = static_cast<T>(img.at(x0 + x, y0 + y, c) / 255.0);
  }
  return out;
}

template Tensor<float> random_crops(const std::vector<Image>&, int, int, Rng&);
template Tensor<double> random_crops(const std::vector<Image>&, int, int, Rng&);

}  // namespace msic
