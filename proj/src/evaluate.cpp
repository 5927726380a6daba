#include "msic/evaluate.hpp"

#include <iomanip>

#include "msic/entropy_model.hpp"
#include "msic/errors.hpp"
#include "msic/layers.hpp"

namespace msic {

template <typename T>
std::vector<EvalRow> evaluate_images(const CodecModel<T>& model, const std::vector<NamedImage>& images,
                                     const std::vector<double>& qualities, const CodingOptions& options) {
  std::vector<EvalRow> rows;
  for (const NamedImage& img : images) {
    for (double q : qualities) {
      EvalRow row{img.name, q};
      try {
        const EncodeResult r = encode(model, img.image, q, nullptr, options);
        const Image out = decode(model, r.bytes, nullptr, options);
        row.bpp = r.bpp;
        row.psnr = psnr(img.image, out);
      } catch (const std::exception& e) {
        row.status = std::string("error: ") + e.what();
      }
      rows.push_back(row);
    }
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows) {
  out << "file,q,bpp,psnr,status\n" << std::setprecision(8);
  for (const EvalRow& r : rows) {
    out << csv_field(r.file) << ',' << r.q << ',' << r.bpp << ',' << r.psnr << ',' << csv_field(r.status) << '\n';
  }
}

template <typename T>
std::vector<ReencodeRow> reencode_loop(const CodecModel<T>& model, const Image& image, double q, int n) {
  if (n < 1) throw RangeError("re-encode iteration count must be at least 1");
  std::vector<ReencodeRow> rows;
  Image current = image;
  for (int i = 1; i <= n; ++i) {
    const EncodeResult r = encode(model, current, q);
    current = decode(model, r.bytes);
    rows.push_back({i, r.bpp, psnr(image, current)});
  }
  return rows;
}

void write_reencode_csv(std::ostream& out, const std::vector<ReencodeRow>& rows) {
  out << "iteration,bpp,psnr\n" << std::setprecision(8);
  for (const ReencodeRow& r : rows) out << r.iteration << ',' << r.bpp << ',' << r.psnr << '\n';
}

std::vector<std::vector<double>> receptive_field_map(int size) {
  if (size < 3 || size % 2 == 0) throw RangeError("receptive field grid size must be odd and at least 3");
  ModelConfig config;
  config.spatial_context = "multi";
  config.spatial_context_width = 1;
  Rng rng(0);
  SpatialContext<double> stack("probe", config, 1, rng);
  for (Conv2d<double>& l : stack.layers) {
    l.weight.value.fill(1.0);
    l.bias.value.fill(0.0);
  }
  Tape<double> tape;
  Tensor<double> ones(Shape{1, 1, size, size});
  ones.fill(1.0);
  const Var<double> x = tape.leaf(ones);
  Tensor<double> pick(Shape{1, 1, size, size});
  pick.at(0, 0, size / 2, size / 2) = 1.0;
  tape.backward(sum(mul(stack.raw(&tape, x), Var<double>::constant(pick))));
  std::vector<std::vector<double>> grid(size, std::vector<double>(size));
  for (int y = 0; y < size; ++y)
    for (int xx = 0; xx < size; ++xx) grid[y][xx] = std::abs(x.grad().at(0, 0, y, xx));
  return grid;
}

void write_grid_csv(std::ostream& out, const std::vector<std::vector<double>>& grid) {
  out << std::setprecision(10);
  for (const auto& row : grid) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

template std::vector<EvalRow> evaluate_images(const CodecModel<float>&, const std::vector<NamedImage>&,
                                              const std::vector<double>&, const CodingOptions&);
template std::vector<EvalRow> evaluate_images(const CodecModel<double>&, const std::vector<NamedImage>&,
                                              const std::vector<double>&, const CodingOptions&);
template std::vector<ReencodeRow> reencode_loop(const CodecModel<float>&, const Image&, double, int);
template std::vector<ReencodeRow> reencode_loop(const CodecModel<double>&, const Image&, double, int);

}  // namespace msic
