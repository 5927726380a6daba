#include "msic/entropy_model.hpp"

#include <cmath>

namespace msic {

KernelMask spatial_mask_a() {
  const std::vector<double> v{0, 1, 0, 1, 0, 1, 0, 1, 0};
  return KernelMask(3, v);
}

KernelMask spatial_mask_b() {
  const std::vector<double> v{1, 0, 1, 0, 1, 0, 1, 0, 1};
  return KernelMask(3, v);
}

KernelMask checkerboard_mask(int k) {
  std::vector<double> v(static_cast<std::size_t>(k) * k);
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) v[y * k + x] = ((y + x - k + 1) % 2 != 0) ? 1.0 : 0.0;
  return KernelMask(k, v);
}

template <typename T>
SpatialContext<T>::SpatialContext(const std::string& name, const ModelConfig& config,
                                  int channels, Rng& rng) {
  const int w = config.spatial_context_width;
  if (config.spatial_context == "multi") {
    layers.emplace_back(name + ".a", channels, w, 3, rng, ConvSpec{.mask = spatial_mask_a()});
    for (int i = 1; i <= 3; ++i) {
      layers.emplace_back(name + ".b" + std::to_string(i), w, w, 3, rng,
                          ConvSpec{.mask = spatial_mask_b()});
    }
  } else if (config.spatial_context == "single") {
    layers.emplace_back(name + ".single", channels, w, config.single_kernel, rng,
                        ConvSpec{.mask = checkerboard_mask(config.single_kernel)});
  }
}

template <typename T>
Var<T> SpatialContext<T>::raw(Tape<T>* tape, const Var<T>& anchors) const {
  Var<T> f = anchors;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    f = layers[i](tape, f);
    if (i + 1 < layers.size()) f = relu(f);
  }
  return f;
}

template <typename T>
Var<T> SpatialContext<T>::operator()(Tape<T>* tape, const Var<T>& anchors) const {
  if (layers.empty()) return Var<T>();
  const Shape s = anchors.shape();
  return mul(raw(tape, anchors), Var<T>::constant(non_anchor_mask<T>(s.h, s.w)));
}

template <typename T>
void SpatialContext<T>::collect(ParamList<T>& out) {
  for (auto& l : layers) l.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
ScaleEntropyModel<T>::ScaleEntropyModel(const ModelConfig& config, int s, Rng& rng)
    : scale(s) {
  const auto layout = config.layout();
  const ScaleLayout& l = layout.at(s - 1);
  channels = l.channels;
  last = s == config.scales();
  const int hidden_channels = last ? 0 : (s == config.scales() - 1 ? layout.back().channels : l.hidden);
  const std::string name = "entropy.scale" + std::to_string(s);

  Tensor<T> table(Shape{config.q_max + 1, channels, 1, 1});
  for (int q = 0; q <= config.q_max; ++q)
    for (int c = 0; c < channels; ++c)
      table.at(q, c, 0, 0) = static_cast<T>((q - config.q_max) * 0.5 * std::log(2.0));
  log_gain = Parameter<T>(name + ".log_gain", std::move(table));

  if (last) {
    prior_log_sigma = Parameter<T>(name + ".prior_log_sigma",
                                   Tensor<T>(Shape{1, channels, 1, 1}, static_cast<T>(std::log(16.0))));
  } else {
    channel = ContextStack<T>(name + ".channel", hidden_channels, config.channel_context_width,
                              2 * channels, rng);
  }
  spatial = SpatialContext<T>(name + ".spatial", config, channels, rng);
  ep1 = Conv2d<T>(name + ".ep1", 2 * channels + spatial.out_channels(), config.param_width, 1, rng);
  ep2 = Conv2d<T>(name + ".ep2", config.param_width, 2 * channels, 1, rng);
  for (int c = channels; c < 2 * channels; ++c) ep2.bias.value[c] = static_cast<T>(std::log(16.0));
  if (config.use_lrp) {
    const int lrp_in = (last ? 0 : hidden_channels) + channels;
    lrp = ContextStack<T>(name + ".lrp", lrp_in, config.lrp_width, channels, rng, true);
  }
}

template <typename T>
Var<T> ScaleEntropyModel<T>::channel_features(Tape<T>* tape, const Var<T>& hidden,
                                              const Shape& y) const {
  if (last) {
    const Var<T> log_sigma = clamp(use(tape, prior_log_sigma), static_cast<T>(std::log(kSigmaMin)),
                                   static_cast<T>(std::log(kSigmaMax)));
    const Var<T> zeros = Var<T>::constant(Tensor<T>(Shape{y.n, channels, y.h, y.w}));
    return concat_channels<T>({zeros, add(zeros, log_sigma)});
  }
  if (!hidden.defined()) throw ShapeError("channel context needs the hidden state of scale " + std::to_string(scale));
  const Shape h = hidden.shape();
  if (h.n != y.n || h.h != y.h || h.w != y.w) {
    throw ShapeError("hidden state " + h.str() + " does not align with latent " + y.str());
  }
  return channel(tape, hidden);
}

template <typename T>
GaussianParams<T> ScaleEntropyModel<T>::params(Tape<T>* tape, const Var<T>& ch,
                                               const Var<T>& sp) const {
  Var<T> in = ch;
  if (spatial.out_channels() > 0) {
    Var<T> s = sp;
    if (!s.defined()) {
      const Shape c = ch.shape();
      s = Var<T>::constant(Tensor<T>(Shape{c.n, spatial.out_channels(), c.h, c.w}));
    }
    in = concat_channels<T>({ch, s});
  }
  const Var<T> out = ep2(tape, relu(ep1(tape, in)));
  GaussianParams<T> p;
  p.mu = slice_channels(out, 0, channels);
  p.sigma = exp(clamp(slice_channels(out, channels, channels), static_cast<T>(std::log(kSigmaMin)),
                      static_cast<T>(std::log(kSigmaMax))));
  return p;
}

template <typename T>
Var<T> ScaleEntropyModel<T>::gains(Tape<T>* tape, std::span<const double> qualities) const {
  return gain_lookup(use(tape, log_gain), qualities);
}

template <typename T>
Var<T> ScaleEntropyModel<T>::lrp_correction(Tape<T>* tape, const Var<T>& hidden,
                                            const Var<T>& y_hat, const Var<T>& inv_gain) const {
  const Var<T> in = last ? y_hat : concat_channels<T>({hidden, y_hat});
  // The clamp keeps tanh strictly inside (-1, 1) at 32-bit precision.
  const Var<T> r = msic::tanh(clamp(lrp(tape, in), T(-8), T(8)));
  return mul(msic::scale(r, T(0.5)), inv_gain);
}

template <typename T>
void ScaleEntropyModel<T>::collect(ParamList<T>& out) {
  out.push_back(&log_gain);
  if (last) {
    out.push_back(&prior_log_sigma);
  } else {
    channel.collect(out);
  }
  spatial.collect(out);
  ep1.collect(out);
  ep2.collect(out);
  if (lrp.conv1.weight.value.numel() > 0) lrp.collect(out);
}

template <typename T>
Var<T> gained_sigma(const Var<T>& sigma, const Var<T>& gain) {
  return clamp(mul(sigma, gain), static_cast<T>(kSigmaMin), static_cast<T>(kSigmaMax));
}

template class SpatialContext<float>;
template class SpatialContext<double>;
template class ScaleEntropyModel<float>;
template class ScaleEntropyModel<double>;
template Var<float> gained_sigma(const Var<float>&, const Var<float>&);
template Var<double> gained_sigma(const Var<double>&, const Var<double>&);

}  // namespace msic
