#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "msic/config.hpp"
#include "msic/layers.hpp"

namespace msic {

enum class PassMode {
  kInference,  // uninitialized actnorms act as identity
  kTraining,   // uninitialized actnorms are an error
};

// t' = (t + beta) * exp(gamma), per channel.
template <typename T>
class ActNorm {
 public:
  ActNorm() = default;
  ActNorm(const std::string& name, int channels);

  Var<T> forward(Tape<T>* tape, const Var<T>& x, PassMode mode) const;
  Var<T> reverse(Tape<T>* tape, const Var<T>& x) const;

  // beta = -mean, gamma = -log(std) over batch and spatial extents.
  void initialize(const Tensor<T>& batch);
  bool initialized() const { return flag.value[0] != T(0); }
  void collect(ParamList<T>& out);

  Parameter<T> beta;
  Parameter<T> gamma;
  Parameter<T> flag;  // non-trainable; 1 once initialized
};

// Per-pixel channel mixing u = W t with an invertible C x C matrix W.
template <typename T>
class Inv1x1 {
 public:
  Inv1x1() = default;
  // Starts from a random rotation (orthogonal, det +1).
  Inv1x1(const std::string& name, int channels, Rng& rng);

  Var<T> forward(Tape<T>* tape, const Var<T>& x) const;
  // Differentiates through the inverse when `tape` tracks the weight;
  // otherwise uses the cached inverse.
  Var<T> reverse(Tape<T>* tape, const Var<T>& x) const;

  // Inverse of the current weight, recomputed when the weight has changed.
  // Throws NumericError if |det W| <= 1e-6.
  Tensor<T> inverse() const;
  bool inverse_stale() const;
  double log_abs_det() const;
  void collect(ParamList<T>& out) { out.push_back(&weight); }

  Parameter<T> weight;

 private:
  struct Cache {
    std::mutex mutex;
    Tensor<T> source;
    Tensor<T> inverse;
  };
  std::unique_ptr<Cache> cache_ = std::make_unique<Cache>();
};

// u = (u1, u2) split at C/2; u2' = (u2 + bias) * exp(2 sigmoid(scale) - 1)
// with (bias, scale) computed from u1 by a residual block and a 1x1 head.
template <typename T>
class AffineCoupling {
 public:
  AffineCoupling() = default;
  AffineCoupling(const std::string& name, int channels, int width, Rng& rng);

  Var<T> forward(Tape<T>* tape, const Var<T>& x) const;
  Var<T> reverse(Tape<T>* tape, const Var<T>& x) const;
  // (bias, scale) for a given conditioning half.
  std::pair<Var<T>, Var<T>> conditioner(Tape<T>* tape, const Var<T>& u1) const;
  void collect(ParamList<T>& out);

  int channels = 0;
  Conv2d<T> conv1, conv2, head;
};

template <typename T>
struct InvertibleUnit {
  ActNorm<T> actnorm;
  Inv1x1<T> mixing;
  AffineCoupling<T> coupling;
};

// squeeze -> units -> split into (y, h).
template <typename T>
class InvertibleBlock {
 public:
  InvertibleBlock() = default;
  InvertibleBlock(const std::string& name, int in_channels, int y_channels, int units, int width,
                  Rng& rng);

  std::pair<Var<T>, Var<T>> forward(Tape<T>* tape, const Var<T>& x, PassMode mode) const;
  Var<T> reverse(Tape<T>* tape, const Var<T>& y, const Var<T>& h) const;
  // Data-dependent init of every uninitialized actnorm, unit by unit.
  // Returns the block output for the next block.
  Tensor<T> initialize(const Tensor<T>& x);
  void collect(ParamList<T>& out);

  int in_channels = 0;  // before the squeeze
  int y_channels = 0;
  std::vector<InvertibleUnit<T>> units;
};

template <typename T>
struct Latents {
  std::vector<Var<T>> y;       // y_1 .. y_S
  std::vector<Var<T>> hidden;  // h_1 .. h_{S-2}, forward-pass hidden states
};

template <typename T>
class Transform {
 public:
  Transform() = default;
  Transform(const ModelConfig& config, Rng& rng);

  // x: (N, 3, H, W) with H, W divisible by 2^blocks.
  Latents<T> forward(Tape<T>* tape, const Var<T>& x, PassMode mode) const;
  // Initializes uninitialized actnorms from the batch x.
  void initialize(const Tensor<T>& x);
  Var<T> reverse(Tape<T>* tape, const std::vector<Var<T>>& y) const;
  // Hidden state h_i (1-based) rebuilt from y_{i+1} .. y_S. The last hidden
  // state h_{S-1} is y_S itself.
  Var<T> partial_reverse(Tape<T>* tape, const std::vector<Var<T>>& y, int i) const;
  // Inverse of block b (1-based): (y_b, h_b) -> h_{b-1}, or x for b = 1.
  Var<T> block_reverse(Tape<T>* tape, int b, const Var<T>& y, const Var<T>& h) const;

  void collect(ParamList<T>& out);
  std::vector<Inv1x1<T>*> mixings();
  std::vector<ActNorm<T>*> actnorms();
  int scales() const { return static_cast<int>(blocks.size()) + 1; }

  std::vector<InvertibleBlock<T>> blocks;

 private:
  void check_latents(const std::vector<Var<T>>& y, std::size_t from) const;
};

// Random C x C rotation drawn from `rng`.
Tensor<double> random_rotation(int channels, Rng& rng);

}  // namespace msic
