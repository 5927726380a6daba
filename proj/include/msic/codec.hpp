#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "msic/bitstream.hpp"
#include "msic/config.hpp"
#include "msic/entropy_model.hpp"
#include "msic/image.hpp"
#include "msic/postprocess.hpp"
#include "msic/transform.hpp"
#include "msic/weights.hpp"

namespace msic {

template <typename T>
class CodecModel {
 public:
  explicit CodecModel(const ModelConfig& config = ModelConfig::tiny(), std::uint64_t seed = 1);

  // Every parameter and buffer, in a fixed order with unique names.
  ParamList<T> parameters();
  // Number of trainable scalars.
  std::size_t parameter_count();
  double lambda(int q) const { return config.lambdas.at(static_cast<std::size_t>(q)); }

  WeightsFile to_weights();
  // Throws FormatError if an entry is missing or has the wrong shape.
  static CodecModel from_weights(const WeightsFile& file);
  void save(const std::string& path) { to_weights().save(path); }
  static CodecModel load(const std::string& path) { return from_weights(WeightsFile::load(path)); }
  // Copies parameter values from a model of another precision.
  template <typename U>
  void copy_from(CodecModel<U>& other);

  ModelConfig config;
  Transform<T> transform;
  std::vector<ScaleEntropyModel<T>> entropy;  // [0] is scale 1
  PostProcessNet<T> post;
};

// Moves an untrained model away from its identity start: adds
// scale * N(0, 1) to every trainable tensor except the gain tables and the
// last-scale prior, and marks all actnorms initialized.
template <typename T>
void perturb_parameters(CodecModel<T>& model, Rng rng, double scale = 0.05);

// Decoder-side modules switched off for ablations; a switch only matters
// for modules the model has.
struct CodingOptions {
  bool lrp = true;
  bool postprocess = true;
};

template <typename T>
struct ScaleTrace {
  Tensor<T> y_hat;    // dequantized latent before residual prediction
  Tensor<T> y_final;  // after residual prediction
  Tensor<T> mu;
  Tensor<T> sigma;    // gained scale used for coding
  std::vector<std::int32_t> symbols;  // in coding order
  double estimated_bits = 0.0;
};

template <typename T>
struct CodingTrace {
  std::vector<ScaleTrace<T>> scales;  // [0] is scale 1
  Tensor<T> x_rev;                    // transform output before post-processing
  Tensor<T> x_hat;
};

// Where symbols come from: the encoder quantizes the gained residual, the
// decoder reads them from the stream, a replay takes them from a list.
class SymbolChannel {
 public:
  virtual ~SymbolChannel() = default;
  virtual void begin_scale(int scale) { (void)scale; }
  // `residual` is the gained residual (only meaningful when encoding).
  virtual std::int32_t exchange(double residual, double sigma) = 0;
};

// Runs the scale 5 -> 1 two-pass coding loop shared by encoder and decoder.
// `latents` is null when decoding. `padded` is the (1, 3, H, W) input shape.
template <typename T>
CodingTrace<T> run_coding(const CodecModel<T>& model, const std::vector<std::type_identity_t<Tensor<T>>>* latents,
                          const Shape& padded, double q, SymbolChannel& channel,
                          const CodingOptions& options = {});

struct EncodeResult {
  std::vector<std::uint8_t> bytes;
  double bpp = 0.0;
  std::size_t header_bits = 0;
  std::vector<double> chunk_bits;      // per scale, [0] is scale 1
  std::vector<double> estimated_bits;  // discretized-Gaussian estimate
};

// Throws RangeError if q is outside [0, q_max].
template <typename T>
EncodeResult encode(const CodecModel<T>& model, const Image& image, double q,
                    std::type_identity_t<CodingTrace<T>>* trace = nullptr, const CodingOptions& options = {});

// Throws ConfigMismatchError when the stream was made by another config and
// FormatError when it is corrupt.
template <typename T>
Image decode(const CodecModel<T>& model, std::span<const std::uint8_t> bytes,
             std::type_identity_t<CodingTrace<T>>* trace = nullptr, const CodingOptions& options = {});

// Re-runs decoding from known symbols (per scale, in coding order).
template <typename T>
CodingTrace<T> replay(const CodecModel<T>& model,
                      const std::vector<std::vector<std::int32_t>>& symbols, const Shape& padded,
                      double q, const CodingOptions& options = {});

template <typename T>
struct TrainForward {
  Var<T> loss;
  double bpp = 0.0;  // batch mean
  double mse = 0.0;  // batch mean, [0, 1] pixel domain
  double lambda = 0.0;  // batch mean of the sampled lambdas
};

// Differentiable rate-distortion objective on a batch (N, 3, H, W) in [0, 1]
// with one integer quality per sample. Uniform noise for the rate comes
// from `noise`.
template <typename T>
TrainForward<T> training_forward(const CodecModel<T>& model, Tape<T>& tape, const Tensor<T>& batch,
                                 std::span<const double> qualities, Rng& noise);

}  // namespace msic
