#include "msic/layers.hpp"

#include <cmath>

namespace msic {

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in, int out, int k, Rng& rng, ConvSpec spec)
    : mask(std::move(spec.mask)), stride(spec.stride), pad(spec.pad < 0 ? k / 2 : spec.pad) {
  if (mask && mask->size() != k) throw ShapeError(name + ": mask size differs from kernel");
  Tensor<T> w(Shape{out, in, k, k});
  Tensor<T> b(Shape{1, out, 1, 1});
  if (!spec.zero_init) {
    const int taps = mask ? mask->active_count() : k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, in * taps)));
    Rng r = rng.split(name);
    for (T& v : w.values()) v = static_cast<T>(r.uniform(-bound, bound));
    for (T& v : b.values()) v = static_cast<T>(r.uniform(-bound, bound));
  }
  weight = Parameter<T>(name + ".weight", std::move(w));
  bias = Parameter<T>(name + ".bias", std::move(b));
}

template <typename T>
Var<T> Conv2d<T>::operator()(Tape<T>* tape, const Var<T>& x) const {
  ConvOptions o;
  o.stride = stride;
  o.pad = pad;
  o.mask = mask ? &*mask : nullptr;
  return conv2d(x, use(tape, weight), use(tape, bias), o);
}

template <typename T>
ContextStack<T>::ContextStack(const std::string& name, int in, int width, int out, Rng& rng,
                              bool zero_head)
    : conv1(name + ".conv1", in, width, 3, rng),
      conv2(name + ".conv2", width, width, 3, rng),
      head(name + ".head", width, out, 1, rng, ConvSpec{.zero_init = zero_head}) {}

template <typename T>
Var<T> ContextStack<T>::operator()(Tape<T>* tape, const Var<T>& x) const {
  return head(tape, relu(conv2(tape, relu(conv1(tape, x)))));
}

template <typename T>
void ContextStack<T>::collect(ParamList<T>& out) {
  conv1.collect(out);
  conv2.collect(out);
  head.collect(out);
}

template <typename T>
Tensor<T> anchor_mask(int h, int w) {
  Tensor<T> m(Shape{1, 1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(0, 0, y, x) = ((y + x) % 2 == 0) ? T(1) : T(0);
  return m;
}

template <typename T>
Tensor<T> non_anchor_mask(int h, int w) {
  Tensor<T> m = anchor_mask<T>(h, w);
  for (T& v : m.values()) v = T(1) - v;
  return m;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class ContextStack<float>;
template class ContextStack<double>;
template Tensor<float> anchor_mask(int, int);
template Tensor<double> anchor_mask(int, int);
template Tensor<float> non_anchor_mask(int, int);
template Tensor<double> non_anchor_mask(int, int);

}  // namespace msic
