#pragma once

#include <functional>
#include <string>
#include <vector>

#include "msic/autograd.hpp"
#include "msic/rng.hpp"

namespace msic {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Relative error denominator floor, so near-zero gradients are compared
  // on an absolute scale.
  double floor = 1e-2;
  // Entries probed per parameter; all entries when the tensor is smaller.
  int probes = 12;
  // Failing entries are re-measured with the step divided by 10 this many
  // times; the smallest error counts.
  int kink_retries = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[index]: analytic vs numeric"
  int checked = 0;
  bool passed = true;
};

using LossFn = std::function<Var<double>(Tape<double>&)>;

// Compares backward() gradients of `loss` against central differences for a
// random subset of entries of each parameter.
GradCheckResult grad_check(const std::vector<Parameter<double>*>& params,
                           const LossFn& loss, Rng& rng,
                           const GradCheckOptions& options = {});

// sum(out * r) with a fixed random r drawn from `rng`; reduces any output to
// a scalar without symmetric cancellations.
Var<double> random_projection(const Var<double>& out, Rng rng);

}  // namespace msic
