#include "msic/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msic/range_coder.hpp"

namespace msic {

template <typename T>
CodecModel<T>::CodecModel(const ModelConfig& c, std::uint64_t seed) : config(c) {
  config.validate();
  Rng rng(seed);
  transform = Transform<T>(config, rng);
  for (int s = 1; s <= config.scales(); ++s) entropy.emplace_back(config, s, rng);
  if (config.use_postprocess) post = PostProcessNet<T>(config.postprocess_width, rng);
}

template <typename T>
ParamList<T> CodecModel<T>::parameters() {
  ParamList<T> out;
  transform.collect(out);
  for (auto& e : entropy) e.collect(out);
  if (config.use_postprocess) post.collect(out);
  return out;
}

template <typename T>
std::size_t CodecModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const Parameter<T>* p : parameters())
    if (p->trainable) n += p->value.numel();
  return n;
}

template <typename T>
WeightsFile CodecModel<T>::to_weights() {
  WeightsFile f;
  f.add_text("__config__", config.canonical());
  for (const Parameter<T>* p : parameters()) f.add(p->name, p->value);
  return f;
}

template <typename T>
CodecModel<T> CodecModel<T>::from_weights(const WeightsFile& file) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(file.text("__config__"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config entry is not valid JSON: ") + e.what());
  }
  CodecModel<T> model(ModelConfig::from_json(j));
  for (Parameter<T>* p : model.parameters()) {
    Tensor<T> t = file.tensor<T>(p->name);
    if (t.shape() != p->value.shape()) {
      throw FormatError("weights entry '" + p->name + "' has shape " + t.shape().str() + ", expected " +
                        p->value.shape().str());
    }
    p->value = std::move(t);
  }
  return model;
}

template <typename T>
template <typename U>
void CodecModel<T>::copy_from(CodecModel<U>& other) {
  if (other.config.canonical() != config.canonical()) throw ConfigMismatchError("copy_from: configs differ");
  const ParamList<T> mine = parameters();
  const ParamList<U> theirs = other.parameters();
  for (std::size_t i = 0; i < mine.size(); ++i) mine[i]->value = theirs[i]->value.template cast<T>();
}

template <typename T>
void perturb_parameters(CodecModel<T>& model, Rng rng, double scale) {
  for (Parameter<T>* p : model.parameters()) {
    if (!p->trainable || p->name.ends_with("log_gain") || p->name.ends_with("prior_log_sigma")) continue;
    for (T& v : p->value.values()) v += static_cast<T>(scale * rng.normal());
  }
  for (ActNorm<T>* a : model.transform.actnorms()) a->flag.value[0] = T(1);
}

template void perturb_parameters(CodecModel<float>&, Rng, double);
template void perturb_parameters(CodecModel<double>&, Rng, double);

// ---------------------------------------------------------------------------

namespace {

void check_quality(const ModelConfig& config, double q) {
  if (!(q >= 0.0 && q <= config.q_max)) {
    throw RangeError("quality " + std::to_string(q) + " outside [0, " + std::to_string(config.q_max) + "]");
  }
}

class EncoderChannel : public SymbolChannel {
 public:
  explicit EncoderChannel(int scales) : encoders(scales), symbols(scales) {}
  void begin_scale(int scale) override { current = scale - 1; }
  std::int32_t exchange(double residual, double sigma) override {
    const double r = std::round(residual);
    if (!(std::abs(r) < 1073741824.0)) throw RangeError("quantized latent magnitude too large to code");
    const auto s = static_cast<std::int32_t>(r);
    encoders[current].encode_symbol(CdfTable::gaussian(sigma), s);
    symbols[current].push_back(s);
    return s;
  }
  std::vector<RangeEncoder> encoders;
  std::vector<std::vector<std::int32_t>> symbols;
  int current = 0;
};

class DecoderChannel : public SymbolChannel {
 public:
  explicit DecoderChannel(const Bitstream& b) {
    for (const auto& c : b.chunks) decoders.emplace_back(c);
    symbols.resize(b.chunks.size());
  }
  void begin_scale(int scale) override { current = scale - 1; }
  std::int32_t exchange(double, double sigma) override {
    const std::int32_t s = decoders[current].decode_symbol(CdfTable::gaussian(sigma));
    symbols[current].push_back(s);
    return s;
  }
  std::vector<RangeDecoder> decoders;
  std::vector<std::vector<std::int32_t>> symbols;
  int current = 0;
};

class ReplayChannel : public SymbolChannel {
 public:
  explicit ReplayChannel(const std::vector<std::vector<std::int32_t>>& s) : symbols(s) {}
  void begin_scale(int scale) override {
    current = scale - 1;
    if (current >= static_cast<int>(symbols.size())) throw FormatError("replay: missing symbols for scale");
    next = 0;
  }
  std::int32_t exchange(double, double) override {
    if (next >= symbols[current].size()) throw FormatError("replay: symbol list too short");
    return symbols[current][next++];
  }
  const std::vector<std::vector<std::int32_t>>& symbols;
  int current = 0;
  std::size_t next = 0;
};

}  // namespace

template <typename T>
CodingTrace<T> run_coding(const CodecModel<T>& model, const std::vector<std::type_identity_t<Tensor<T>>>* latents,
                          const Shape& padded, double q, SymbolChannel& channel,
                          const CodingOptions& options) {
  const ModelConfig& cfg = model.config;
  check_quality(cfg, q);
  const int align = cfg.alignment();
  if (padded.n != 1 || padded.c != 3 || padded.h % align != 0 || padded.w % align != 0) {
    throw ShapeError("coding needs a single 3-channel input aligned to " + std::to_string(align) +
                     ", got " + padded.str());
  }
  const bool use_lrp = options.lrp && cfg.use_lrp;
  const bool use_post = options.postprocess && cfg.use_postprocess;
  const auto layout = cfg.layout();
  const int scales = cfg.scales();
  if (latents != nullptr && static_cast<int>(latents->size()) != scales) {
    throw ShapeError("expected " + std::to_string(scales) + " latent scales");
  }
  const std::vector<double> qs{q};

  CodingTrace<T> trace;
  trace.scales.resize(scales);
  Var<T> hidden;
  for (int s = scales; s >= 1; --s) {
    const int i = s - 1;
    const ScaleEntropyModel<T>& em = model.entropy[i];
    const int d = layout[i].downscale;
    const Shape ys{1, layout[i].channels, padded.h / d, padded.w / d};
    const Tensor<T>* y = latents ? &(*latents)[i] : nullptr;
    if (y && y->shape() != ys) throw ShapeError("latent y" + std::to_string(s) + " has shape " + y->shape().str());

    const Var<T> ch = em.channel_features(nullptr, hidden, ys);
    const Var<T> gain = em.gains(nullptr, qs);
    const Var<T> inv_gain = reciprocal(gain);
    const Tensor<T>& g = gain.value();
    const Tensor<T>& ig = inv_gain.value();

    ScaleTrace<T>& st = trace.scales[i];
    st.mu = Tensor<T>(ys);
    st.sigma = Tensor<T>(ys);
    Tensor<T> y_hat(ys);
    channel.begin_scale(s);
    const auto code_pass = [&](int parity, const GaussianParams<T>& p) {
      const Tensor<T> sigma = gained_sigma(p.sigma, gain).value();
      const Tensor<T>& mu = p.mu.value();
      for (int c = 0; c < ys.c; ++c) {
        const T gc = g[c];
        const T igc = ig[c];
        for (int r = 0; r < ys.h; ++r)
          for (int col = (r + parity) % 2; col < ys.w; col += 2) {
            const std::size_t idx = y_hat.index(0, c, r, col);
            const T residual = y ? ((*y)[idx] - mu[idx]) * gc : T(0);
            const double sd = std::clamp(static_cast<double>(sigma[idx]), kSigmaMin, kSigmaMax);
            const std::int32_t sym = channel.exchange(residual, sd);
            y_hat[idx] = static_cast<T>(sym) * igc + mu[idx];
            st.mu[idx] = mu[idx];
            st.sigma[idx] = sigma[idx];
            st.symbols.push_back(sym);
            st.estimated_bits += gaussian_symbol_bits(sym, sd);
          }
      }
    };
    code_pass(0, em.params(nullptr, ch, Var<T>()));
    const Var<T> sp = em.spatial_features(nullptr, Var<T>::constant(y_hat));
    code_pass(1, em.params(nullptr, ch, sp));

    Var<T> y_final = Var<T>::constant(y_hat);
    if (use_lrp) y_final = add(y_final, em.lrp_correction(nullptr, hidden, y_final, inv_gain));
    st.y_hat = std::move(y_hat);
    st.y_final = y_final.value();

    if (s == scales) {
      hidden = y_final;
    } else if (s > 1) {
      hidden = model.transform.block_reverse(nullptr, s, y_final, hidden);
    } else {
      const Var<T> x = model.transform.block_reverse(nullptr, 1, y_final, hidden);
      trace.x_rev = x.value();
      trace.x_hat = use_post ? model.post(nullptr, x).value() : trace.x_rev;
    }
  }
  return trace;
}

template <typename T>
EncodeResult encode(const CodecModel<T>& model, const Image& image, double q, std::type_identity_t<CodingTrace<T>>* trace,
                    const CodingOptions& options) {
  const ModelConfig& cfg = model.config;
  check_quality(cfg, q);
  if (image.width < 1 || image.height < 1 || image.width > 65535 || image.height > 65535 ||
      static_cast<std::uint64_t>(image.width) * image.height > (1u << 28)) {
    throw RangeError("image dimensions " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " are not supported");
  }
  const std::uint32_t q_fixed = quality_to_fixed(q);
  const double q_coded = quality_from_fixed(q_fixed);
  const Tensor<T> x = image_to_tensor<T>(image, cfg.alignment());
  const Latents<T> lat = model.transform.forward(nullptr, Var<T>::constant(x), PassMode::kInference);
  std::vector<Tensor<T>> y;
  for (const auto& v : lat.y) y.push_back(v.value());

  EncoderChannel channel(cfg.scales());
  CodingTrace<T> t = run_coding(model, &y, x.shape(), q_coded, channel, options);

  Bitstream b;
  b.width = static_cast<std::uint32_t>(image.width);
  b.height = static_cast<std::uint32_t>(image.height);
  b.padded_width = static_cast<std::uint32_t>(x.shape().w);
  b.padded_height = static_cast<std::uint32_t>(x.shape().h);
  b.quality = q_fixed;
  b.config_hash = cfg.hash();
  EncodeResult result;
  for (int i = 0; i < cfg.scales(); ++i) {
    b.chunks.push_back(channel.encoders[i].finish());
    b.symbol_crc.push_back(symbol_crc32(channel.symbols[i]));
    result.chunk_bits.push_back(8.0 * static_cast<double>(b.chunks.back().size()));
    result.estimated_bits.push_back(t.scales[i].estimated_bits);
  }
  result.bytes = b.serialize();
  result.header_bits = 8 * b.header_bytes();
  result.bpp = 8.0 * static_cast<double>(result.bytes.size()) / (static_cast<double>(image.width) * image.height);
  if (trace) *trace = std::move(t);
  return result;
}

template <typename T>
Image decode(const CodecModel<T>& model, std::span<const std::uint8_t> bytes, std::type_identity_t<CodingTrace<T>>* trace,
             const CodingOptions& options) {
  const ModelConfig& cfg = model.config;
  const Bitstream b = Bitstream::parse(bytes);
  if (b.config_hash != cfg.hash()) {
    throw ConfigMismatchError("bitstream was produced by a different model configuration");
  }
  if (static_cast<int>(b.chunks.size()) != cfg.scales()) throw FormatError("bitstream scale count does not match the model");
  const double q = quality_from_fixed(b.quality);
  if (q > cfg.q_max) throw FormatError("bitstream quality exceeds q_max");
  const int align = cfg.alignment();
  if (b.padded_width != static_cast<std::uint32_t>(round_up(static_cast<int>(b.width), align)) ||
      b.padded_height != static_cast<std::uint32_t>(round_up(static_cast<int>(b.height), align))) {
    throw FormatError("padded dimensions in header do not match the model alignment");
  }
  const Shape padded{1, 3, static_cast<int>(b.padded_height), static_cast<int>(b.padded_width)};
  DecoderChannel channel(b);
  CodingTrace<T> t;
  try {
    t = run_coding(model, nullptr, padded, q, channel, options);
  } catch (const NumericError& e) {
    throw FormatError(std::string("corrupt bitstream: decoded latents are not finite (") + e.what() + ")");
  }
  for (int i = 0; i < cfg.scales(); ++i) {
    if (symbol_crc32(channel.symbols[i]) != b.symbol_crc[i]) {
      throw FormatError("symbol checksum mismatch in scale " + std::to_string(i + 1) + " (" +
                        std::to_string(b.chunks[i].size()) + "-byte chunk, " +
                        std::to_string(channel.decoders[i].position()) + " bytes consumed)");
    }
  }
  Image out = tensor_to_image(t.x_hat, static_cast<int>(b.width), static_cast<int>(b.height));
  if (trace) *trace = std::move(t);
  return out;
}

template <typename T>
CodingTrace<T> replay(const CodecModel<T>& model, const std::vector<std::vector<std::int32_t>>& symbols,
                      const Shape& padded, double q, const CodingOptions& options) {
  ReplayChannel channel(symbols);
  return run_coding(model, nullptr, padded, q, channel, options);
}

// ---------------------------------------------------------------------------

template <typename T>
TrainForward<T> training_forward(const CodecModel<T>& model, Tape<T>& tape, const Tensor<T>& batch,
                                 std::span<const double> qualities, Rng& noise) {
  const ModelConfig& cfg = model.config;
  const Shape bs = batch.shape();
  if (static_cast<int>(qualities.size()) != bs.n) throw ShapeError("need one quality per batch element");
  for (double q : qualities) check_quality(cfg, q);
  Tape<T>* tp = &tape;
  const Var<T> x = Var<T>::constant(batch);
  const Latents<T> lat = model.transform.forward(tp, x, PassMode::kTraining);
  const int scales = cfg.scales();
  const bool noise_only = cfg.surrogate == "noise";

  Var<T> bits;  // (N, 1, 1, 1)
  Var<T> hidden;
  Var<T> x_rev;
  for (int s = scales; s >= 1; --s) {
    const int i = s - 1;
    const ScaleEntropyModel<T>& em = model.entropy[i];
    const Var<T>& y = lat.y[i];
    const Shape ys = y.shape();
    const Var<T> ch = em.channel_features(tp, hidden, ys);
    const Var<T> gain = em.gains(tp, qualities);
    const Var<T> inv_gain = reciprocal(gain);

    Tensor<T> u(ys);
    for (T& v : u.values()) v = static_cast<T>(noise.uniform(-0.5, 0.5));
    const Var<T> uniform = Var<T>::constant(std::move(u));

    // Anchor pass: quantized anchors feed the spatial context.
    const GaussianParams<T> pa = em.params(tp, ch, Var<T>());
    const Var<T> ra = mul(sub(y, pa.mu), gain);
    const Var<T> qa = noise_only ? add(ra, uniform) : ste_round(ra);
    const Var<T> anchors =
        mul(add(mul(qa, inv_gain), pa.mu), Var<T>::constant(anchor_mask<T>(ys.h, ys.w)));
    // At anchor positions the spatial input is zero, so these parameters
    // coincide with the anchor pass there.
    const GaussianParams<T> p = em.params(tp, ch, em.spatial_features(tp, anchors));

    const Var<T> residual = mul(sub(y, p.mu), gain);
    const Var<T> noisy = add(residual, uniform);
    const Var<T> b = batch_sum(gaussian_bits(noisy, gained_sigma(p.sigma, gain)));
    bits = bits.defined() ? add(bits, b) : b;

    Var<T> y_hat = add(mul(noise_only ? noisy : ste_round(residual), inv_gain), p.mu);
    if (cfg.use_lrp) y_hat = add(y_hat, em.lrp_correction(tp, hidden, y_hat, inv_gain));

    if (s == scales) {
      hidden = y_hat;
    } else if (s > 1) {
      hidden = model.transform.block_reverse(tp, s, y_hat, hidden);
    } else {
      x_rev = model.transform.block_reverse(tp, 1, y_hat, hidden);
    }
  }
  const Var<T> x_hat = cfg.use_postprocess ? model.post(tp, x_rev) : x_rev;

  const double pixels = static_cast<double>(bs.h) * bs.w;
  const Var<T> bpp = scale(bits, static_cast<T>(1.0 / pixels));
  const Var<T> mse = scale(batch_sum(square(sub(x_hat, x))), static_cast<T>(1.0 / (3.0 * pixels)));
  Tensor<T> weights(Shape{bs.n, 1, 1, 1});
  double lambda_sum = 0.0;
  for (int n = 0; n < bs.n; ++n) {
    const double l = model.lambda(static_cast<int>(std::lround(qualities[n])));
    lambda_sum += l;
    weights[n] = static_cast<T>(l * 255.0 * 255.0);
  }
  TrainForward<T> out;
  out.loss = mean(add(bpp, mul(mse, Var<T>::constant(std::move(weights)))));
  double bpp_sum = 0.0, mse_sum = 0.0;
  for (int n = 0; n < bs.n; ++n) {
    bpp_sum += bpp.value()[n];
    mse_sum += mse.value()[n];
  }
  out.bpp = bpp_sum / bs.n;
  out.mse = mse_sum / bs.n;
  out.lambda = lambda_sum / bs.n;
  return out;
}

template class CodecModel<float>;
template class CodecModel<double>;
template void CodecModel<float>::copy_from(CodecModel<double>&);
template void CodecModel<double>::copy_from(CodecModel<float>&);
template void CodecModel<double>::copy_from(CodecModel<double>&);
template void CodecModel<float>::copy_from(CodecModel<float>&);

#define MSIC_INSTANTIATE_CODEC(T)                                                                      \
  template CodingTrace<T> run_coding(const CodecModel<T>&, const std::vector<std::type_identity_t<Tensor<T>>>*, const Shape&, \
                                     double, SymbolChannel&, const CodingOptions&);                     \
  template EncodeResult encode(const CodecModel<T>&, const Image&, double, std::type_identity_t<CodingTrace<T>>*,             \
                               const CodingOptions&);                                                   \
  template Image decode(const CodecModel<T>&, std::span<const std::uint8_t>, std::type_identity_t<CodingTrace<T>>*,          \
                        const CodingOptions&);                                                          \
  template CodingTrace<T> replay(const CodecModel<T>&, const std::vector<std::vector<std::int32_t>>&,  \
                                 const Shape&, double, const CodingOptions&);                           \
  template TrainForward<T> training_forward(const CodecModel<T>&, Tape<T>&, const Tensor<T>&,          \
                                            std::span<const double>, Rng&);

MSIC_INSTANTIATE_CODEC(float)
MSIC_INSTANTIATE_CODEC(double)

}  // namespace msic
