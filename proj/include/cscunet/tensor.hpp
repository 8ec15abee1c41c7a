#pragma once

// Dense NCHW tensors with a dynamically recorded graph for reverse-mode
// differentiation. A Tensor is a shared handle: copies alias the same node.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace cscunet {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
};

std::ostream& operator<<(std::ostream& os, const Shape& s);
std::string to_string(const Shape& s);

/// 64-byte aligned storage. Vectorized kernels choose their peeling from the
/// address, so a fixed alignment keeps results independent of where the
/// allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order; inputs always have smaller seq
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  [[nodiscard]] bool is_leaf() const { return !backward_fn; }
  Buffer<T>& grad_buffer();
};

std::uint64_t next_node_seq();

/// Thread-local switch. While disabled, ops record no graph.
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

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(shape, requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false) {
    return full(Shape{}, value, requires_grad);
  }

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t numel() const { return node_->shape.numel(); }

  [[nodiscard]] std::span<T> data() { return node_->data; }
  [[nodiscard]] std::span<const T> data() const { return node_->data; }
  [[nodiscard]] T item() const;
  [[nodiscard]] T at(int n, int c, int h, int w) const;
  T& at(int n, int c, int h, int w);

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);

  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span when no gradient has been accumulated.
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf holding a copy of the data.
  [[nodiscard]] Tensor detach() const;
  [[nodiscard]] Tensor<double> to_double() const;
  [[nodiscard]] Tensor<float> to_float() const;

  /// Reverse-mode pass from a single-element tensor. Leaf gradients
  /// accumulate across calls; interior gradients are rebuilt each call.
  void backward() const;

  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }
  [[nodiscard]] const char* op_name() const { return node_->op; }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Nodes reachable from a root, in creation order. Walking it backwards
/// visits every op after all ops that consume its output.
template <typename T>
struct Tape {
  std::vector<Node<T>*> ops;

  static Tape record(const Tensor<T>& root);
};

/// Builds an op result. The graph edge and backward closure are kept only
/// when grad mode is on and some input requires grad. Throws
/// NonFiniteError if the data contains NaN or Inf.
template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, Buffer<T> data,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(Node<T>&)> backward_fn);

template <typename T>
void check_finite(std::span<const T> values, const char* op);

}  // namespace cscunet
