#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msic/autograd.hpp"
#include "msic/ops.hpp"
#include "msic/rng.hpp"

namespace msic {

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

struct ConvSpec {
  int stride = 1;
  int pad = -1;  // -1: k / 2
  std::optional<KernelMask> mask;
  bool zero_init = false;
};

// Convolution layer owning its weight (out, in, k, k) and bias (1, out, 1, 1).
// Weights and biases start uniform in +-1/sqrt(fan_in), where fan_in counts
// only unmasked taps.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int k, Rng& rng, ConvSpec spec = {});

  Var<T> operator()(Tape<T>* tape, const Var<T>& x) const;
  void collect(ParamList<T>& out) { out.push_back(&weight); out.push_back(&bias); }

  int in_channels() const { return weight.value.shape().c; }
  int out_channels() const { return weight.value.shape().n; }

  Parameter<T> weight;
  Parameter<T> bias;
  std::optional<KernelMask> mask;
  int stride = 1;
  int pad = 0;
};

// conv3x3 -> relu -> conv3x3 -> relu -> conv1x1, the shape shared by the
// channel context and residual prediction networks.
template <typename T>
class ContextStack {
 public:
  ContextStack() = default;
  ContextStack(const std::string& name, int in, int width, int out, Rng& rng,
               bool zero_head = false);
  Var<T> operator()(Tape<T>* tape, const Var<T>& x) const;
  void collect(ParamList<T>& out);

  Conv2d<T> conv1, conv2, head;
};

// Constant (1,1,H,W) mask: 1 where (row + col) is even.
template <typename T>
Tensor<T> anchor_mask(int h, int w);
template <typename T>
Tensor<T> non_anchor_mask(int h, int w);


template <typename T>
std::size_t count_elements(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const Parameter<T>* p : params) n += p->value.numel();
  return n;
}

}  // namespace msic
