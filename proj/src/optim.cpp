#include "msic/optim.hpp"

#include <cmath>

namespace msic {

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const AdamOptions& o) {
  for (Parameter<T>* p : params) {
    if (!p->trainable) {
      p->zero_grad();
      continue;
    }
    if (p->adam_m.shape() != p->value.shape()) p->adam_m = Tensor<T>(p->value.shape());
    if (p->adam_v.shape() != p->value.shape()) p->adam_v = Tensor<T>(p->value.shape());
    if (p->grad.shape() != p->value.shape()) p->grad = Tensor<T>(p->value.shape());
    ++p->adam_step;
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(p->adam_step));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(p->adam_step));
    T* w = p->value.data();
    T* m = p->adam_m.data();
    T* v = p->adam_v.data();
    const T* g = p->grad.data();
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = o.lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps);
      w[i] = static_cast<T>(w[i] - update);
    }
    p->zero_grad();
  }
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) p->zero_grad();
}

template void adam_step(const std::vector<Parameter<float>*>&, const AdamOptions&);
template void adam_step(const std::vector<Parameter<double>*>&, const AdamOptions&);
template void zero_grads(const std::vector<Parameter<float>*>&);
template void zero_grads(const std::vector<Parameter<double>*>&);

}  // namespace msic
