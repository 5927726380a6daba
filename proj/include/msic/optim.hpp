#pragma once

#include <vector>

#include "msic/autograd.hpp"

namespace msic {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of every trainable parameter, followed by
// zeroing all gradients. Each parameter keeps its own step counter.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const AdamOptions& options);

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params);

}  // namespace msic
