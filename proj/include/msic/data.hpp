#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msic/image.hpp"
#include "msic/rng.hpp"
#include "msic/tensor.hpp"

namespace msic {

// Smooth gradients plus a few oriented sinusoids plus pixel noise, rounded
// to 8 bits. Deterministic in the generator state.
Image synthetic_image(int width, int height, Rng& rng);
// The built-in training set: `count` square patches from Rng(seed).split("synthetic").
std::vector<Image> synthetic_set(int count, int size, std::uint64_t seed);
// A single image drawn from a stream disjoint from synthetic_set.
Image synthetic_holdout(int width, int height, std::uint64_t seed);

struct NamedImage {
  std::string name;
  Image image;
};

// All *.ppm files of a directory in name order. Unreadable files are
// reported in `errors` as "name: message" and skipped.
std::vector<NamedImage> load_folder(const std::string& dir, std::vector<std::string>* errors = nullptr);

// Random size x size crops (one per image, cycling through `images`)
// stacked into (N, 3, size, size) in [0, 1].
template <typename T>
Tensor<T> random_crops(const std::vector<Image>& images, int count, int size, Rng& rng);

}  // namespace msic
