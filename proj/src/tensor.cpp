#include "msic/tensor.hpp"

#include <algorithm>
#include <sstream>

#include <Eigen/Core>

namespace msic {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor extent " + shape.str());
  }
  data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values)
    : Tensor(shape, Buffer<T>(values.begin(), values.end())) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape.str());
  }
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::ensure_finite(const char* where) const {
  if (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(), static_cast<Eigen::Index>(data_.size()))
          .allFinite()) {
    return;
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << where << ": non-finite value " << data_[i] << " at flat index " << i
         << " of tensor " << shape_.str();
      throw NumericError(os.str());
    }
  }
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw ShapeError("+= shape mismatch " + shape_.str() + " vs " +
                     other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("max_abs_diff shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  }
  return m;
}

template <typename T>
ChannelStats channel_stats(const Tensor<T>& input) {
  const Shape& s = input.shape();
  ChannelStats stats;
  stats.mean.assign(s.c, 0.0);
  stats.variance.assign(s.c, 0.0);
  const std::size_t plane = s.plane();
  // Welford update per channel, accumulated in double.
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double m2 = 0.0;
    std::size_t count = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* p = input.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        ++count;
        const double x = static_cast<double>(p[i]);
        const double delta = x - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (x - mean);
      }
    }
    stats.mean[c] = mean;
    stats.variance[c] = count > 0 ? m2 / static_cast<double>(count) : 0.0;
  }
  return stats;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template ChannelStats channel_stats(const Tensor<float>&);
template ChannelStats channel_stats(const Tensor<double>&);

}  // namespace msic
