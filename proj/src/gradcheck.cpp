#include "msic/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "msic/ops.hpp"

namespace msic {

GradCheckResult grad_check(const std::vector<Parameter<double>*>& params,
                           const LossFn& loss, Rng& rng, const GradCheckOptions& options) {
  for (Parameter<double>* p : params) p->grad = Tensor<double>(p->value.shape());
  {
    Tape<double> tape;
    const Var<double> l = loss(tape);
    tape.backward(l);
  }
  auto evaluate = [&] {
    Tape<double> tape;
    return loss(tape).value()[0];
  };

  GradCheckResult result;
  for (Parameter<double>* p : params) {
    if (!p->trainable) continue;
    const std::size_t n = p->value.numel();
    std::vector<std::size_t> indices;
    if (n <= static_cast<std::size_t>(options.probes)) {
      for (std::size_t i = 0; i < n; ++i) indices.push_back(i);
    } else {
      for (int k = 0; k < options.probes; ++k) {
        indices.push_back(static_cast<std::size_t>(rng.next_u64() % n));
      }
    }
    for (std::size_t i : indices) {
      const double saved = p->value[i];
      const double analytic = p->grad[i];
      auto rel_error = [&](double step, double& numeric) {
        p->value[i] = saved + step;
        const double plus = evaluate();
        p->value[i] = saved - step;
        const double minus = evaluate();
        p->value[i] = saved;
        numeric = (plus - minus) / (2.0 * step);
        return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), options.floor});
      };
      double numeric = 0.0;
      double rel = rel_error(options.step, numeric);
      // A ReLU kink inside [-step, step] spoils the central difference; it
      // drops out of the interval as the step shrinks, a wrong gradient does not.
      for (int k = 1; k <= options.kink_retries && rel > options.tolerance; ++k) {
        double retry = 0.0;
        const double r = rel_error(options.step * std::pow(0.1, k), retry);
        if (r < rel) {
          rel = r;
          numeric = retry;
        }
      }
      ++result.checked;
      if (rel > result.max_rel_error || result.worst.empty()) {
        if (rel >= result.max_rel_error) {
          result.max_rel_error = rel;
          std::ostringstream os;
          os << p->name << "[" << i << "]: " << analytic << " vs " << numeric;
          result.worst = os.str();
        }
      }
    }
  }
  result.passed = result.max_rel_error <= options.tolerance;
  return result;
}

Var<double> random_projection(const Var<double>& out, Rng rng) {
  Tensor<double> r(out.shape());
  for (double& v : r.values()) v = rng.normal();
  return sum(mul(out, Var<double>::constant(std::move(r))));
}

}  // namespace msic
