#include "cscunet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "cscunet/errors.hpp"

namespace cscunet {

namespace {
std::atomic<std::uint64_t> g_seq{0};
thread_local bool g_grad_enabled = true;
}  // namespace

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << '(' << s.n << ", " << s.c << ", " << s.h << ", " << s.w << ')';
}

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

std::uint64_t next_node_seq() { return ++g_seq; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Buffer<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(shape.numel(), T(0));
  return grad;
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << op << ": non-finite value " << values[i] << " at flat index " << i;
      throw NonFiniteError(os.str());
    }
  }
}

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_leaf(Shape shape, Buffer<T> data, bool requires_grad,
                                   const char* what) {
  if (shape.n <= 0 || shape.c <= 0 || shape.h <= 0 || shape.w <= 0) {
    throw ShapeError("tensor dims must be positive, got " + to_string(shape));
  }
  if (data.size() != shape.numel()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  }
  check_finite<T>(data, what);
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = next_node_seq();
  return node;
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : node_(make_leaf<T>(shape, Buffer<T>(shape.numel(), T(0)), requires_grad, "tensor")) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(make_leaf<T>(shape, Buffer<T>(data.begin(), data.end()), requires_grad, "tensor")) {}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  return from_node(make_leaf<T>(shape, Buffer<T>(shape.numel(), value), requires_grad, "tensor"));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T& Tensor<T>::at(int n, int c, int h, int w) {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_node(make_leaf<T>(shape(), node_->data, false, "tensor"));
}

template <typename T>
Tensor<double> Tensor<T>::to_double() const {
  return Tensor<double>(shape(), std::vector<double>(node_->data.begin(), node_->data.end()));
}

template <typename T>
Tensor<float> Tensor<T>::to_float() const {
  std::vector<float> out(node_->data.size());
  std::transform(node_->data.begin(), node_->data.end(), out.begin(),
                 [](T v) { return static_cast<float>(v); });
  return Tensor<float>(shape(), std::move(out));
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<const Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node().get()};
  while (!stack.empty()) {
    Node<T>* node = stack.back();
    stack.pop_back();
    if (!node->requires_grad || !seen.insert(node).second) continue;
    tape.ops.push_back(node);
    for (const auto& in : node->inputs) stack.push_back(in.get());
  }
  std::sort(tape.ops.begin(), tape.ops.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });
  for (const Node<T>* node : tape.ops) {
    for (const auto& in : node->inputs) {
      assert(in->seq < node->seq && "graph is not topologically ordered");
      (void)in;
    }
  }
  return tape;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a single-element loss, got " + to_string(shape()));
  }
  if (!requires_grad()) return;
  Tape<T> tape = Tape<T>::record(*this);
  for (Node<T>* node : tape.ops) {
    if (!node->is_leaf()) node->grad.clear();
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = tape.ops.rbegin(); it != tape.ops.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf() || node->grad.empty()) continue;
    node->backward_fn(*node);
  }
  // Interior gradients are scratch space.
  for (Node<T>* node : tape.ops) {
    if (!node->is_leaf()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, Buffer<T> data,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out = Tensor<T>::from_node(make_leaf<T>(shape, std::move(data), false, op));
  const bool track =
      grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
        return t.defined() && t.requires_grad();
      });
  if (track) {
    auto& node = *out.node();
    node.op = op;
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    // Owning edges; backward closures hold raw pointers into these.
    for (auto& in : inputs) {
      if (in.defined()) node.inputs.push_back(in.node());
    }
    node.backward_fn = std::move(backward_fn);
  } else {
    out.node()->op = op;
  }
  return out;
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template struct Tape<float>;
template struct Tape<double>;
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_op_result(const char*, Shape, Buffer<float>,
                                      std::vector<Tensor<float>>,
                                      std::function<void(Node<float>&)>);
template Tensor<double> make_op_result(const char*, Shape, Buffer<double>,
                                       std::vector<Tensor<double>>,
                                       std::function<void(Node<double>&)>);

}  // namespace cscunet
