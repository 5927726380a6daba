#include "msic/transform.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace msic {

Tensor<double> random_rotation(int channels, Rng& rng) {
  Eigen::MatrixXd g(channels, channels);
  for (int r = 0; r < channels; ++r)
    for (int c = 0; c < channels; ++c) g(r, c) = rng.normal();
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < channels; ++c) {
    if (r(c, c) < 0) q.col(c) *= -1.0;
  }
  if (q.determinant() < 0) q.col(0) *= -1.0;
  Tensor<double> out(Shape{channels, channels, 1, 1});
  for (int r2 = 0; r2 < channels; ++r2)
    for (int c = 0; c < channels; ++c) out.at(r2, c, 0, 0) = q(r2, c);
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
ActNorm<T>::ActNorm(const std::string& name, int channels)
    : beta(name + ".beta", Tensor<T>(Shape{1, channels, 1, 1})),
      gamma(name + ".gamma", Tensor<T>(Shape{1, channels, 1, 1})),
      flag(name + ".initialized", Tensor<T>(Shape{1, 1, 1, 1}), false) {}

template <typename T>
void ActNorm<T>::initialize(const Tensor<T>& batch) {
  const ChannelStats stats = channel_stats(batch);
  const int c = beta.value.shape().c;
  if (static_cast<int>(stats.mean.size()) != c) {
    throw ShapeError(beta.name + ": init batch has the wrong channel count");
  }
  for (int i = 0; i < c; ++i) {
    beta.value[i] = static_cast<T>(-stats.mean[i]);
    gamma.value[i] = static_cast<T>(-std::log(std::sqrt(stats.variance[i] + 1e-6)));
  }
  flag.value[0] = T(1);
}

template <typename T>
Var<T> ActNorm<T>::forward(Tape<T>* tape, const Var<T>& x, PassMode mode) const {
  if (!initialized() && mode == PassMode::kTraining) {
    throw std::logic_error(beta.name + " used for training before data-dependent init");
  }
  return mul(add(x, use(tape, beta)), exp(use(tape, gamma)));
}

template <typename T>
Var<T> ActNorm<T>::reverse(Tape<T>* tape, const Var<T>& x) const {
  return sub(mul(x, exp(neg(use(tape, gamma)))), use(tape, beta));
}

template <typename T>
void ActNorm<T>::collect(ParamList<T>& out) {
  out.push_back(&beta);
  out.push_back(&gamma);
  out.push_back(&flag);
}

// ---------------------------------------------------------------------------

template <typename T>
Inv1x1<T>::Inv1x1(const std::string& name, int channels, Rng& rng) {
  Rng r = rng.split(name);
  weight = Parameter<T>(name + ".weight", random_rotation(channels, r).template cast<T>());
}

template <typename T>
Var<T> Inv1x1<T>::forward(Tape<T>* tape, const Var<T>& x) const {
  return conv2d(x, use(tape, weight), Var<T>());
}

template <typename T>
Var<T> Inv1x1<T>::reverse(Tape<T>* tape, const Var<T>& x) const {
  if (tape != nullptr && weight.trainable) {
    return conv2d(x, matrix_inverse(tape->param(weight)), Var<T>());
  }
  return conv2d(x, Var<T>::constant(inverse()), Var<T>());
}

template <typename T>
Tensor<T> Inv1x1<T>::inverse() const {
  std::lock_guard<std::mutex> lock(cache_->mutex);
  if (cache_->source.shape() != weight.value.shape() ||
      cache_->source.storage() != weight.value.storage()) {
    cache_->inverse = matrix_inverse(Var<T>::constant(weight.value)).value();
    cache_->source = weight.value;
  }
  return cache_->inverse;
}

template <typename T>
bool Inv1x1<T>::inverse_stale() const {
  std::lock_guard<std::mutex> lock(cache_->mutex);
  return cache_->source.shape() != weight.value.shape() ||
         cache_->source.storage() != weight.value.storage();
}

template <typename T>
double Inv1x1<T>::log_abs_det() const {
  return msic::log_abs_det(weight.value);
}

// ---------------------------------------------------------------------------

template <typename T>
AffineCoupling<T>::AffineCoupling(const std::string& name, int c, int width, Rng& rng)
    : channels(c) {
  if (c % 2 != 0) {
    throw ShapeError(name + ": coupling needs an even channel count, got " + std::to_string(c));
  }
  conv1 = Conv2d<T>(name + ".conv1", c / 2, width, 3, rng);
  conv2 = Conv2d<T>(name + ".conv2", width, width, 3, rng);
  head = Conv2d<T>(name + ".head", width, c, 1, rng, ConvSpec{.zero_init = true});
}

template <typename T>
std::pair<Var<T>, Var<T>> AffineCoupling<T>::conditioner(Tape<T>* tape, const Var<T>& u1) const {
  const Var<T> a = relu(conv1(tape, u1));
  const Var<T> r = relu(add(a, conv2(tape, a)));
  const Var<T> out = head(tape, r);
  const int half = channels / 2;
  return {slice_channels(out, 0, half), slice_channels(out, half, half)};
}

template <typename T>
Var<T> AffineCoupling<T>::forward(Tape<T>* tape, const Var<T>& x) const {
  if (x.shape().c != channels) throw ShapeError("coupling channel mismatch " + x.shape().str());
  const int half = channels / 2;
  const Var<T> u1 = slice_channels(x, 0, half);
  const Var<T> u2 = slice_channels(x, half, half);
  const auto [bias, scale] = conditioner(tape, u1);
  const Var<T> factor = exp(add_scalar(msic::scale(sigmoid(scale), T(2)), T(-1)));
  return concat_channels<T>({u1, mul(add(u2, bias), factor)});
}

template <typename T>
Var<T> AffineCoupling<T>::reverse(Tape<T>* tape, const Var<T>& x) const {
  if (x.shape().c != channels) throw ShapeError("coupling channel mismatch " + x.shape().str());
  const int half = channels / 2;
  const Var<T> u1 = slice_channels(x, 0, half);
  const Var<T> v2 = slice_channels(x, half, half);
  const auto [bias, scale] = conditioner(tape, u1);
  const Var<T> inv_factor = exp(add_scalar(msic::scale(sigmoid(scale), T(-2)), T(1)));
  return concat_channels<T>({u1, sub(mul(v2, inv_factor), bias)});
}

template <typename T>
void AffineCoupling<T>::collect(ParamList<T>& out) {
  conv1.collect(out);
  conv2.collect(out);
  head.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
InvertibleBlock<T>::InvertibleBlock(const std::string& name, int in, int y, int count,
                                    int width, Rng& rng)
    : in_channels(in), y_channels(y) {
  const int c = 4 * in;
  for (int u = 0; u < count; ++u) {
    const std::string prefix = name + ".unit" + std::to_string(u + 1);
    InvertibleUnit<T> unit;
    unit.actnorm = ActNorm<T>(prefix + ".actnorm", c);
    unit.mixing = Inv1x1<T>(prefix + ".inv1x1", c, rng);
    unit.coupling = AffineCoupling<T>(prefix + ".coupling", c, width, rng);
    units.push_back(std::move(unit));
  }
}

template <typename T>
std::pair<Var<T>, Var<T>> InvertibleBlock<T>::forward(Tape<T>* tape, const Var<T>& x,
                                                      PassMode mode) const {
  if (x.shape().c != in_channels) {
    throw ShapeError("block expects " + std::to_string(in_channels) + " channels, got " +
                     x.shape().str());
  }
  Var<T> t = space_to_depth(x);
  for (auto& unit : units) {
    t = unit.actnorm.forward(tape, t, mode);
    t = unit.mixing.forward(tape, t);
    t = unit.coupling.forward(tape, t);
  }
  const int c = t.shape().c;
  return {slice_channels(t, 0, y_channels), slice_channels(t, y_channels, c - y_channels)};
}

template <typename T>
Tensor<T> InvertibleBlock<T>::initialize(const Tensor<T>& x) {
  Var<T> t = space_to_depth(Var<T>::constant(x));
  for (auto& unit : units) {
    if (!unit.actnorm.initialized()) unit.actnorm.initialize(t.value());
    t = unit.actnorm.forward(nullptr, t, PassMode::kInference);
    t = unit.mixing.forward(nullptr, t);
    t = unit.coupling.forward(nullptr, t);
  }
  return slice_channels(t, y_channels, t.shape().c - y_channels).value();
}

template <typename T>
Var<T> InvertibleBlock<T>::reverse(Tape<T>* tape, const Var<T>& y, const Var<T>& h) const {
  Var<T> t = concat_channels<T>({y, h});
  if (t.shape().c != 4 * in_channels || y.shape().c != y_channels) {
    throw ShapeError("block reverse got y " + y.shape().str() + " and h " + h.shape().str());
  }
  for (auto it = units.rbegin(); it != units.rend(); ++it) {
    t = it->coupling.reverse(tape, t);
    t = it->mixing.reverse(tape, t);
    t = it->actnorm.reverse(tape, t);
  }
  return depth_to_space(t);
}

template <typename T>
void InvertibleBlock<T>::collect(ParamList<T>& out) {
  for (auto& unit : units) {
    unit.actnorm.collect(out);
    unit.mixing.collect(out);
    unit.coupling.collect(out);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Transform<T>::Transform(const ModelConfig& config, Rng& rng) {
  config.validate();
  const auto layout = config.layout();
  int in = 3;
  for (int b = 0; b < config.blocks; ++b) {
    blocks.emplace_back("transform.block" + std::to_string(b + 1), in, layout[b].channels,
                        config.units, config.coupling_widths[b], rng);
    in = layout[b].hidden;
  }
}

template <typename T>
void Transform<T>::initialize(const Tensor<T>& x) {
  Tensor<T> h = x;
  for (auto& b : blocks) h = b.initialize(h);
}

template <typename T>
Latents<T> Transform<T>::forward(Tape<T>* tape, const Var<T>& x, PassMode mode) const {
  const int align = 1 << blocks.size();
  if (x.shape().h % align != 0 || x.shape().w % align != 0) {
    throw ShapeError("transform input extents must be multiples of " + std::to_string(align) +
                     ", got " + x.shape().str());
  }
  Latents<T> out;
  Var<T> h = x;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto [y, next] = blocks[b].forward(tape, h, mode);
    out.y.push_back(y);
    if (b + 1 < blocks.size()) {
      out.hidden.push_back(next);
    } else {
      out.y.push_back(next);
    }
    h = next;
  }
  return out;
}

template <typename T>
void Transform<T>::check_latents(const std::vector<Var<T>>& y, std::size_t from) const {
  const std::size_t s = blocks.size() + 1;
  if (y.size() != s) {
    throw ShapeError("expected " + std::to_string(s) + " latent scales, got " +
                     std::to_string(y.size()));
  }
  for (std::size_t i = from; i < s; ++i) {
    if (!y[i].defined()) throw ShapeError("latent y" + std::to_string(i + 1) + " is missing");
  }
  const Shape last = y[s - 1].shape();
  for (std::size_t i = from; i < s; ++i) {
    const Shape sh = y[i].shape();
    const int factor = i + 1 >= blocks.size() ? 1 : 1 << (blocks.size() - 1 - i);
    const int channels = i < blocks.size()
                             ? blocks[i].y_channels
                             : 4 * blocks.back().in_channels - blocks.back().y_channels;
    if (sh.n != last.n || sh.c != channels || sh.h != last.h * factor ||
        sh.w != last.w * factor) {
      throw ShapeError("latent y" + std::to_string(i + 1) + " has shape " + sh.str() +
                       " which does not match the model configuration");
    }
  }
}

template <typename T>
Var<T> Transform<T>::block_reverse(Tape<T>* tape, int b, const Var<T>& y, const Var<T>& h) const {
  return blocks.at(b - 1).reverse(tape, y, h);
}

template <typename T>
Var<T> Transform<T>::partial_reverse(Tape<T>* tape, const std::vector<Var<T>>& y, int i) const {
  const int s = scales();
  if (i < 1 || i > s - 1) throw ShapeError("partial_reverse level out of range");
  check_latents(y, static_cast<std::size_t>(i));
  Var<T> h = y[s - 1];
  for (int j = s - 2; j >= i; --j) h = block_reverse(tape, j + 1, y[j], h);
  return h;
}

template <typename T>
Var<T> Transform<T>::reverse(Tape<T>* tape, const std::vector<Var<T>>& y) const {
  check_latents(y, 0);
  return block_reverse(tape, 1, y[0], partial_reverse(tape, y, 1));
}

template <typename T>
void Transform<T>::collect(ParamList<T>& out) {
  for (auto& b : blocks) b.collect(out);
}

template <typename T>
std::vector<Inv1x1<T>*> Transform<T>::mixings() {
  std::vector<Inv1x1<T>*> out;
  for (auto& b : blocks)
    for (auto& u : b.units) out.push_back(&u.mixing);
  return out;
}

template <typename T>
std::vector<ActNorm<T>*> Transform<T>::actnorms() {
  std::vector<ActNorm<T>*> out;
  for (auto& b : blocks)
    for (auto& u : b.units) out.push_back(&u.actnorm);
  return out;
}

template class ActNorm<float>;
template class ActNorm<double>;
template class Inv1x1<float>;
template class Inv1x1<double>;
template class AffineCoupling<float>;
template class AffineCoupling<double>;
template class InvertibleBlock<float>;
template class InvertibleBlock<double>;
template class Transform<float>;
template class Transform<double>;

}  // namespace msic
