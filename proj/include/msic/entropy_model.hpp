#pragma once

#include <span>
#include <string>
#include <vector>

#include "msic/config.hpp"
#include "msic/layers.hpp"

namespace msic {

inline constexpr double kSigmaMin = 0.04;
inline constexpr double kSigmaMax = 256.0;

// 3x3 masks of the multi-layer spatial context: A holds the four edge
// neighbours, B the centre and the four diagonals.
KernelMask spatial_mask_a();
KernelMask spatial_mask_b();
// k x k mask of the taps whose offset from the centre has odd parity.
KernelMask checkerboard_mask(int k);

// Spatial context over a latent map whose non-anchor positions are zero.
template <typename T>
class SpatialContext {
 public:
  SpatialContext() = default;
  SpatialContext(const std::string& name, const ModelConfig& config, int channels, Rng& rng);

  // Features at every position, zeroed at anchor positions.
  Var<T> operator()(Tape<T>* tape, const Var<T>& anchors) const;
  // Features before the anchor zeroing, for receptive field probes.
  Var<T> raw(Tape<T>* tape, const Var<T>& anchors) const;
  int out_channels() const { return layers.empty() ? 0 : layers.back().out_channels(); }
  void collect(ParamList<T>& out);

  std::vector<Conv2d<T>> layers;
};

template <typename T>
struct GaussianParams {
  Var<T> mu;
  Var<T> sigma;  // clamped to [kSigmaMin, kSigmaMax]
};

// Entropy parameters, gains and residual prediction for one latent scale.
template <typename T>
class ScaleEntropyModel {
 public:
  ScaleEntropyModel() = default;
  // `scale` is 1-based; the last scale uses the learned prior instead of a
  // channel context network.
  ScaleEntropyModel(const ModelConfig& config, int scale, Rng& rng);

  // (mu_ch, sigma features) with 2C channels. `hidden` is ignored for the
  // last scale; `y_shape` fixes the output extent.
  Var<T> channel_features(Tape<T>* tape, const Var<T>& hidden, const Shape& y_shape) const;
  // `spatial` may be undefined, meaning zero spatial features.
  GaussianParams<T> params(Tape<T>* tape, const Var<T>& channel, const Var<T>& spatial) const;
  Var<T> spatial_features(Tape<T>* tape, const Var<T>& anchors) const { return spatial(tape, anchors); }

  // (N, C, 1, 1) gain vectors for per-sample qualities.
  Var<T> gains(Tape<T>* tape, std::span<const double> qualities) const;
  // Bounded latent correction inv_gain * 0.5 * tanh(net(hidden, y_hat)).
  Var<T> lrp_correction(Tape<T>* tape, const Var<T>& hidden, const Var<T>& y_hat,
                        const Var<T>& inv_gain) const;

  void collect(ParamList<T>& out);

  int scale = 0;
  int channels = 0;
  bool last = false;
  Parameter<T> log_gain;        // (q_max + 1, C, 1, 1)
  Parameter<T> prior_log_sigma; // last scale only, (1, C, 1, 1)
  ContextStack<T> channel;
  SpatialContext<T> spatial;
  Conv2d<T> ep1, ep2;
  ContextStack<T> lrp;
};

// sigma * gain clamped to [kSigmaMin, kSigmaMax].
template <typename T>
Var<T> gained_sigma(const Var<T>& sigma, const Var<T>& gain);

}  // namespace msic
