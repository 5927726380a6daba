#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "msic/bitstream.hpp"
#include "msic/config.hpp"
#include "msic/errors.hpp"
#include "msic/image.hpp"
#include "msic/rng.hpp"
#include "msic/weights.hpp"
#include "zlib.h"

using namespace msic;

namespace {

Bitstream sample_stream() {
  Bitstream b;
  b.width = 100;
  b.height = 37;
  b.padded_width = 112;
  b.padded_height = 48;
  b.quality = quality_to_fixed(3.5);
  b.config_hash = 0x0123456789ABCDEFull;
  b.chunks = {{1, 2, 3}, {}, {9}, {4, 5, 6, 7}, {8}};
  b.symbol_crc = {11, 22, 33, 44, 55};
  return b;
}

Image random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Image img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

}  // namespace

TEST_CASE("bitstream serialize and parse") {
  const Bitstream b = sample_stream();
  const auto bytes = b.serialize();
  CHECK(b.header_bytes() == 36 + 8 * 5);
  CHECK(bytes.size() == b.header_bytes() + 9);
  CHECK(b.total_bytes() == bytes.size());
  CHECK(std::memcmp(bytes.data(), "MSIC", 4) == 0);
  const Bitstream p = Bitstream::parse(bytes);
  CHECK(p.serialize() == bytes);
  CHECK(p.width == 100);
  CHECK(p.padded_height == 48);
  CHECK(p.config_hash == b.config_hash);
  CHECK(p.chunks == b.chunks);
  CHECK(p.symbol_crc == b.symbol_crc);
  CHECK(quality_from_fixed(p.quality) == 3.5);
}

TEST_CASE("bitstream rejects malformed input") {
  const auto good = sample_stream().serialize();
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(Bitstream::parse(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[4] = 7;
  CHECK_THROWS_AS(Bitstream::parse(bad_version), FormatError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, good.size() - 1}) {
    CHECK_THROWS_AS(Bitstream::parse(std::span(good.data(), cut)), FormatError);
  }
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(Bitstream::parse(trailing), FormatError);
  Bitstream dims = sample_stream();
  dims.padded_width = 50;  // smaller than width
  CHECK_THROWS_AS(Bitstream::parse(dims.serialize()), FormatError);
}

TEST_CASE("quality fixed point") {
  CHECK(quality_to_fixed(0.0) == 0u);
  CHECK(quality_to_fixed(11.0) == 11u << 16);
  CHECK(quality_to_fixed(2.5) == (2u << 16) + (1u << 15));
  CHECK(quality_from_fixed(quality_to_fixed(7.3)) == doctest::Approx(7.3).epsilon(1e-5));
  CHECK_THROWS_AS(quality_to_fixed(-1.0), RangeError);
}

TEST_CASE("symbol checksum matches zlib over little-endian words") {
  const std::vector<std::int32_t> s{0, -1, 3000, 7};
  const unsigned char raw[] = {0, 0, 0, 0, 0xFF, 0xFF, 0xFF, 0xFF, 0xB8, 0x0B, 0, 0, 7, 0, 0, 0};
  CHECK(symbol_crc32(s) == crc32(0L, raw, sizeof raw));
}

TEST_CASE("ppm round trip") {
  const Image img = random_image(13, 7, 1);
  const auto bytes = encode_ppm(img);
  CHECK(parse_ppm(bytes) == img);
  const std::string header = "P6\n# comment\n13 7\n255\n";
  std::vector<std::uint8_t> commented(header.begin(), header.end());
  commented.insert(commented.end(), img.pixels.begin(), img.pixels.end());
  CHECK(parse_ppm(commented) == img);
  const std::string path = (std::filesystem::temp_directory_path() / "msic_test.ppm").string();
  write_ppm(path, img);
  CHECK(read_ppm(path) == img);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_ppm("/nonexistent/x.ppm"), std::ios_base::failure);
}

TEST_CASE("ppm rejects unsupported files") {
  const std::string p3 = "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(p3.begin(), p3.end())), FormatError);
  const std::string deep = "P6\n1 1\n65535\n\0\0\0\0\0\0";
  CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(deep.begin(), deep.end())), FormatError);
  const std::string shortdata = "P6\n2 2\n255\nabc";
  CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(shortdata.begin(), shortdata.end())), FormatError);
  const std::string zero = "P6\n0 2\n255\n";
  CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(zero.begin(), zero.end())), FormatError);
}

TEST_CASE("padding") {
  CHECK(round_up(100, 16) == 112);
  CHECK(round_up(768, 16) == 768);
  CHECK(round_up(1, 16) == 16);
  const Image big = random_image(768, 512, 2);
  CHECK(image_to_tensor<float>(big, 16).shape() == Shape{1, 3, 512, 768});

  const Image img = random_image(100, 100, 3);
  const Tensor<double> t = image_to_tensor<double>(img, 16);
  CHECK(t.shape() == Shape{1, 3, 112, 112});
  // Replicated border.
  CHECK(t.at(0, 1, 5, 111) == t.at(0, 1, 5, 99));
  CHECK(t.at(0, 2, 111, 111) == t.at(0, 2, 99, 99));
  CHECK(t.at(0, 0, 3, 4) == img.at(4, 3, 0) / 255.0);
  CHECK(tensor_to_image(t, 100, 100) == img);
  CHECK(tensor_to_image(image_to_tensor<float>(img, 16), 100, 100) == img);
}

TEST_CASE("tensor to image clamps and rounds half away from zero") {
  Tensor<double> t(Shape{1, 3, 1, 4});
  const double v[] = {-0.1, 1.5, 0.5 / 255.0, 254.5 / 255.0};
  for (int x = 0; x < 4; ++x)
    for (int c = 0; c < 3; ++c) t.at(0, c, 0, x) = v[x];
  const Image img = tensor_to_image(t, 4, 1);
  CHECK(img.at(0, 0, 0) == 0);
  CHECK(img.at(1, 0, 0) == 255);
  CHECK(img.at(2, 0, 1) == 1);
  CHECK(img.at(3, 0, 2) == 255);
}

TEST_CASE("psnr") {
  const Image a = random_image(8, 8, 4);
  CHECK(psnr(a, a) == 99.0);
  Image black{8, 8, std::vector<std::uint8_t>(192, 0)};
  Image white{8, 8, std::vector<std::uint8_t>(192, 255)};
  CHECK(psnr(black, white) == doctest::Approx(0.0).epsilon(1e-12));
  Image one = black;
  one.pixels[0] = 10;  // MSE = 100 / 192
  CHECK(psnr(black, one) == doctest::Approx(10.0 * std::log10(255.0 * 255.0 * 192.0 / 100.0)));
  CHECK_THROWS_AS(psnr(a, black.width == 8 ? Image{4, 4, std::vector<std::uint8_t>(48)} : a), ShapeError);
}

TEST_CASE("weights file round trip") {
  Rng rng(1);
  Tensor<float> f(Shape{2, 3, 1, 4});
  for (float& v : f.values()) v = static_cast<float>(rng.normal());
  Tensor<double> d(Shape{1, 1, 2, 2}, std::vector<double>{1.0 / 3.0, -2.5, 1e300, 0.0});
  WeightsFile w;
  w.add("a.weight", f);
  w.add("b", d);
  w.add_text("__config__", "{\"x\": 1}");
  CHECK_THROWS_AS(w.add("b", d), FormatError);
  const WeightsFile back = WeightsFile::parse(w.serialize());
  CHECK(back.serialize() == w.serialize());
  CHECK(back.tensor<float>("a.weight").storage() == f.storage());
  CHECK(back.tensor<double>("b").storage() == d.storage());
  CHECK(back.tensor<double>("a.weight")[1] == static_cast<double>(f[1]));
  CHECK(back.text("__config__") == "{\"x\": 1}");
  CHECK(back.contains("b"));
  CHECK_FALSE(back.contains("c"));
  CHECK_THROWS_AS(back.tensor<float>("c"), FormatError);
  CHECK_THROWS_AS(back.text("b"), FormatError);

  auto bytes = w.serialize();
  bytes.pop_back();
  CHECK_THROWS_AS(WeightsFile::parse(bytes), FormatError);
  bytes = w.serialize();
  bytes.push_back(0);
  CHECK_THROWS_AS(WeightsFile::parse(bytes), FormatError);
  bytes = w.serialize();
  bytes[0] = 'X';
  CHECK_THROWS_AS(WeightsFile::parse(bytes), FormatError);
}

TEST_CASE("config json and hash") {
  const ModelConfig tiny = ModelConfig::tiny();
  const ModelConfig back = ModelConfig::from_json(tiny.to_json());
  CHECK(back.canonical() == tiny.canonical());
  CHECK(back.hash() == tiny.hash());
  ModelConfig other = tiny;
  other.use_lrp = false;
  CHECK(other.hash() != tiny.hash());
  CHECK(ModelConfig::full().hash() != tiny.hash());
  CHECK(tiny.lambdas.at(0) == 0.0018);
  CHECK(tiny.lambdas.at(11) == 1.8);
  CHECK(tiny.q_max == 11);
  CHECK(tiny.alignment() == 16);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"no_such_key", 1}}), FormatError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"blocks", "four"}}), FormatError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"split_ratios", {0.3, 0.25, 0.25, 0.5}}}), FormatError);
  const TrainConfig tc = TrainConfig::from_json(nlohmann::json{{"steps", 5}, {"lr", 0.01}});
  CHECK(tc.steps == 5);
  CHECK(tc.lr == 0.01);
  CHECK(tc.batch == 8);
}
