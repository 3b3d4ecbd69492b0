#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdah/error.hpp"

namespace sdah {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node;

/// Backward rule of a recorded op. It reads `self.grad` and accumulates into
/// the gradient buffers of `self.inputs`.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool consumed = false;  // set once backward has run through this node
  std::uint64_t seq = 0;  // creation order; operands always precede consumers
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying node; ops return
/// fresh nodes and, when any operand requires a gradient, record themselves so
/// `backward()` can run the chain rule in reverse creation order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Size of dimension `i`; negative indices count from the end.
  int dim(int i) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Writable view for leaves (parameters, inputs). Ops never need this.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward && !node_->consumed; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; zeros if no gradient has arrived.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Seeds d(self)/d(self) = 1; requires a single-element tensor.
  void backward();
  void backward(std::span<const T> seed);

  /// Value copy with no graph history.
  Tensor detach() const;

  std::shared_ptr<Node<T>> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

std::uint64_t next_seq();

/// Throws NumericalError naming `op` if any value is NaN or Inf.
template <typename T>
void check_finite(std::span<const T> values, const char* op);

/// Wraps freshly computed values into a node. The backward rule is kept only
/// when recording is enabled and some input requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward);

/// True when `t` participates in gradient flow.
template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

/// Gradient accumulator of input `i`, or nullptr if it takes no gradient.
template <typename T>
T* input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return in->grad_buffer().data();
}

}  // namespace detail

}  // namespace sdah
