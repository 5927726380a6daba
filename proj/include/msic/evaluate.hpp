#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "msic/codec.hpp"
#include "msic/data.hpp"

namespace msic {

struct EvalRow {
  std::string file;
  double q = 0.0;
  double bpp = 0.0;
  double psnr = 0.0;
  std::string status = "ok";  // "ok" or "error: ..."
};

// Real encode -> decode of every image at every quality.
template <typename T>
std::vector<EvalRow> evaluate_images(const CodecModel<T>& model, const std::vector<NamedImage>& images,
                                     const std::vector<double>& qualities, const CodingOptions& options = {});

// Columns: file,q,bpp,psnr,status
void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows);

struct ReencodeRow {
  int iteration = 0;  // 1-based
  double bpp = 0.0;
  double psnr = 0.0;  // against the original image
};

// Encodes, decodes, and re-encodes the decoded image, n times in total.
template <typename T>
std::vector<ReencodeRow> reencode_loop(const CodecModel<T>& model, const Image& image, double q, int n);

// Columns: iteration,bpp,psnr
void write_reencode_csv(std::ostream& out, const std::vector<ReencodeRow>& rows);

// Gradient magnitude of one output of the 1 x mask-A + 3 x mask-B context
// stack (all-ones weights, zero bias) with respect to each input position.
// The probed output sits at the centre of a size x size grid.
std::vector<std::vector<double>> receptive_field_map(int size = 15);
void write_grid_csv(std::ostream& out, const std::vector<std::vector<double>>& grid);

}  // namespace msic
