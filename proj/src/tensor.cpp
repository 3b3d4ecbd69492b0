#include "sdah/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sdah {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_seq{0};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_seq() { return ++g_seq; }

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at element " << i << " produced by " << op;
      throw NumericalError(os.str());
    }
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward) {
  if (shape_numel(shape) != values.size())
    throw ShapeError(std::string(op) + ": value count does not match shape " + shape_str(shape));
  check_finite<T>(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = next_seq();
  node->op = op;
  bool record = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) record = record || wants_grad(in);
  }
  if (record) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.defined() ? in.node() : nullptr);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_result<float>(const char*, Shape, std::vector<float>,
                                          std::vector<Tensor<float>>, BackwardFn<float>);
template Tensor<double> make_result<double>(const char*, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>, BackwardFn<double>);

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  detail::check_finite<T>(values, "tensor construction");
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->seq = detail::next_seq();
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
int Tensor<T>::dim(int i) const {
  int r = rank();
  int k = i < 0 ? i + r : i;
  if (k < 0 || k >= r) throw ShapeError("dimension index out of range for " + shape_str(shape()));
  return node_->shape[k];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (node_->backward) throw GraphError("mutable_data on a recorded op result");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (node_->backward) throw GraphError("requires_grad can only be changed on leaves");
  node_->requires_grad = on;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad_buffer();
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() {
  if (numel() != 1)
    throw ShapeError("backward() without a seed needs a single-element tensor, got " +
                     shape_str(shape()));
  const T one = T(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) {
  if (node_->consumed)
    throw GraphError("backward already ran through this graph; re-run the forward pass");
  if (!node_->requires_grad) throw GraphError("backward on a tensor that does not require grad");
  if (seed.size() != numel()) throw ShapeError("backward seed size mismatch");

  // Collect every recorded node reachable from the root.
  // Owning pointers: clearing inputs below must not free nodes still queued.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::shared_ptr<Node<T>>> stack{node_};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  auto& g = node_->grad_buffer();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];

  for (const auto& n : order) {
    if (!n->backward) continue;
    if (!n->grad.empty()) {
      n->backward(*n);
      for (const auto& in : n->inputs) {
        if (in && in->requires_grad && !in->grad.empty())
          detail::check_finite<T>(in->grad, n->op);
      }
    }
    n->backward = nullptr;
    n->inputs.clear();
    n->consumed = true;
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sdah
