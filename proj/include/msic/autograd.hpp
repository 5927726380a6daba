#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "msic/tensor.hpp"

namespace msic {

template <typename T>
class Tape;

// A learned tensor together with its gradient and Adam moments.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  // Written by backward() through const references held by the tape.
  mutable Tensor<T> grad;
  Tensor<T> adam_m;
  Tensor<T> adam_v;
  std::int64_t adam_step = 0;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<T> initial, bool is_trainable = true)
      : name(std::move(param_name)),
        value(std::move(initial)),
        grad(value.shape()),
        adam_m(value.shape()),
        adam_v(value.shape()),
        trainable(is_trainable) {}

  void zero_grad() const { grad.fill(T(0)); }
};

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient flows in
  const Parameter<T>* param = nullptr;
  Tape<T>* tape = nullptr;
  bool requires_grad = false;

  void accumulate(const Tensor<T>& g);
  // Gradient buffer of value's shape, zero-allocated on first use.
  Tensor<T>& grad_buffer();
};

}  // namespace detail

// Handle to a value produced by an operation. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  // Value with no gradient tracking.
  static Var constant(Tensor<T> value);
  // Parameter used outside of any tape (inference).
  static Var frozen(const Parameter<T>& p) { return constant(p.value); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tape<T>* tape() const { return node_ ? node_->tape : nullptr; }
  // Accumulated gradient of a leaf created with Tape::leaf; zeros if none.
  Tensor<T> grad() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// Ordered record of executed operations. Execution order is a topological
// order of the graph, so backward walks the record in reverse.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const detail::Node<T>& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient is accumulated into `p.grad` by backward().
  Var<T> param(const Parameter<T>& p);
  // Free-standing leaf; read its gradient with Var::grad() after backward().
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);

  // Appends an operation result. `backward` receives the output node and
  // must accumulate into the input nodes it captured.
  Var<T> record(const char* op, Tensor<T> value, Backward backward);

  // Propagates d(loss)/d(.) to every reachable leaf, then clears the tape.
  void backward(const Var<T>& loss);

  // Frees all recorded intermediates and makes the tape reusable.
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool cleared() const { return cleared_; }

  // Op names visited by the last backward(), in visiting order.
  void set_trace(bool on) { trace_enabled_ = on; }
  const std::vector<std::string>& forward_trace() const { return forward_trace_; }
  const std::vector<std::string>& backward_trace() const { return backward_trace_; }

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<detail::Node<T>> out;
    Backward backward;
  };
  std::vector<Entry> entries_;
  bool cleared_ = false;
  bool trace_enabled_ = false;
  std::vector<std::string> forward_trace_;
  std::vector<std::string> backward_trace_;
};

// Tape shared by the inputs that require gradients, or nullptr when none do.
template <typename T>
Tape<T>* active_tape(std::initializer_list<const Var<T>*> inputs);

// Parameter as a graph leaf: tracked on `tape` if non-null, frozen otherwise.
template <typename T>
Var<T> use(Tape<T>* tape, const Parameter<T>& p) {
  return tape ? tape->param(p) : Var<T>::frozen(p);
}

extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace msic
