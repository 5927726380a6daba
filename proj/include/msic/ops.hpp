#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msic/autograd.hpp"

namespace msic {

// Binary k x k tap mask for masked convolutions.
class KernelMask {
 public:
  KernelMask() = default;
  // Throws ShapeError unless `values` holds k*k entries that are all 0 or 1.
  KernelMask(int k, std::span<const double> values);
  static KernelMask ones(int k);

  int size() const { return k_; }
  bool active(int ky, int kx) const { return bits_[ky * k_ + kx] != 0; }
  int active_count() const;
  void set(int ky, int kx, bool on) { bits_[ky * k_ + kx] = on ? 1 : 0; }

 private:
  int k_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct ConvOptions {
  int stride = 1;
  int pad = 0;
  const KernelMask* mask = nullptr;
};

// Cross-correlation of x (N,Ci,H,W) with w (Co,Ci,k,k); `bias` may be an
// undefined Var. Masked-out taps contribute nothing regardless of the stored
// weight and receive zero gradient.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const ConvOptions& options = {});

// Elementwise binary ops broadcast any extent of size 1 against the other
// operand (per-channel vectors are (1,C,1,1)).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);
template <typename T> Var<T> neg(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> reciprocal(const Var<T>& a);
// Gradient passes only where lo < a < hi.
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
// Rounds half away from zero; the gradient is passed through unchanged.
template <typename T> Var<T> ste_round(const Var<T>& a);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// (N,C,H,W) -> (N,1,1,1)
template <typename T> Var<T> batch_sum(const Var<T>& a);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_channels(const Var<T>& a, int begin, int count);

// (N,C,H,W) -> (N,4C,H/2,W/2). Each source channel contributes four
// consecutive output channels holding its 2x2 patch in row-major order.
template <typename T> Var<T> space_to_depth(const Var<T>& a);
template <typename T> Var<T> depth_to_space(const Var<T>& a);
template <typename T> Var<T> upsample_nearest2x(const Var<T>& a);

// Inverse of a (C,C,1,1) matrix; throws NumericError if |det| <= 1e-6.
template <typename T> Var<T> matrix_inverse(const Var<T>& w);

// -log2 of the discretized Gaussian mass of `v` under N(0, sigma^2):
// Phi((v+0.5)/sigma) - Phi((v-0.5)/sigma), floored at `min_prob`.
template <typename T>
Var<T> gaussian_bits(const Var<T>& v, const Var<T>& sigma, double min_prob = 1e-9);

// Per-sample gain vectors from a (Q,C,1,1) log-gain table with exponential
// interpolation between the neighbouring integer qualities. Output (N,C,1,1).
template <typename T>
Var<T> gain_lookup(const Var<T>& log_table, std::span<const double> qualities);

// Plain tensor helpers.
template <typename T> T round_half_away(T v);

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& a);
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& a);

// log |det| of a (C,C,1,1) matrix.
template <typename T>
double log_abs_det(const Tensor<T>& w);

}  // namespace msic
