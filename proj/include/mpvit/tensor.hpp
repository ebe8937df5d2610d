#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpvit/errors.hpp"

namespace mpvit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kMatmul,
  kLinear,
  kSoftmax,
  kLogSoftmax,
  kBatchNorm,
  kLayerNorm,
  kActivation,
  kReduce,
  kConcat,
  kSlice,
  kReshape,
  kPermute,
  kAdd,
  kMul,
  kScale,
  kNll,
};

const char* op_name(OpKind kind);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  OpKind op = OpKind::kLeaf;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

std::uint64_t next_node_id();

}  // namespace detail

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Shared handle to an N-D row-major buffer plus its tape node. Copies alias the
// same storage; use clone() or detach() for an independent buffer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  std::uint64_t node_id() const { return node_->id; }
  OpKind op() const { return node_->op; }
  bool is_leaf() const { return node_->op == OpKind::kLeaf; }

  // Same values, fresh leaf with no tape history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse-mode sweep from a scalar loss. Leaves accumulate into grad.
  void backward() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

// Builds an op result. When no input requires grad (or grad mode is off) the
// node stores neither inputs nor a backward closure.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, OpKind op,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward);

}  // namespace detail

// Walks the tape behind `root` in creation order and names the first node
// holding a NaN or Inf, or returns an empty string.
template <typename T>
std::string first_non_finite(const Tensor<T>& root);

// Thread-local multiply-accumulate counter fed by conv2d, matmul and linear.
std::uint64_t mac_counter();
void reset_mac_counter();

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mpvit
