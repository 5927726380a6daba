#include "msic/autograd.hpp"

#include <stdexcept>

namespace msic {
namespace detail {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (param != nullptr) {
    if (param->grad.shape() != value.shape()) param->grad = Tensor<T>(value.shape());
    return param->grad;
  }
  if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  grad_buffer() += g;
}

}  // namespace detail

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (!node_) return {};
  if (node_->param) return node_->param->grad;
  if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
  return node_->grad;
}

template <typename T>
Var<T> Tape<T>::param(const Parameter<T>& p) {
  cleared_ = false;
  auto node = std::make_shared<detail::Node<T>>();
  node->value = p.value;
  node->param = &p;
  node->tape = this;
  node->requires_grad = p.trainable;
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  cleared_ = false;
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  node->tape = this;
  node->requires_grad = requires_grad;
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, Backward backward) {
  cleared_ = false;
  value.ensure_finite(op);
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  node->tape = this;
  node->requires_grad = true;
  entries_.push_back(Entry{op, node, std::move(backward)});
  if (trace_enabled_) forward_trace_.emplace_back(op);
  return Var<T>(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (cleared_) {
    throw std::logic_error("backward called on a cleared tape");
  }
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  backward_trace_.clear();
  if (loss.requires_grad()) {
    if (loss.tape() != this) {
      throw std::logic_error("loss was recorded on a different tape");
    }
    loss.node()->grad_buffer().fill(T(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      detail::Node<T>& out = *it->out;
      if (out.grad.empty()) continue;
      if (trace_enabled_) backward_trace_.emplace_back(it->op);
      it->backward(out);
    }
  }
  entries_.clear();
  forward_trace_.clear();
  cleared_ = true;
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  forward_trace_.clear();
  backward_trace_.clear();
  cleared_ = false;
}

template <typename T>
Tape<T>* active_tape(std::initializer_list<const Var<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : inputs) {
    if (v == nullptr || !v->requires_grad()) continue;
    if (tape != nullptr && v->tape() != tape) {
      throw std::logic_error("operation mixes values from different tapes");
    }
    tape = v->tape();
  }
  return tape;
}

template struct detail::Node<float>;
template struct detail::Node<double>;
template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;
template Tape<float>* active_tape(std::initializer_list<const Var<float>*>);
template Tape<double>* active_tape(std::initializer_list<const Var<double>*>);

}  // namespace msic
