#include "mpvit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mpvit {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_macs = 0;
std::atomic<std::uint64_t> g_next_id{1};

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kActivation: return "activation";
    case OpKind::kReduce: return "reduce";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kNll: return "nll";
  }
  return "?";
}

std::uint64_t detail::next_node_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

std::uint64_t mac_counter() { return g_macs; }
void reset_mac_counter() { g_macs = 0; }

namespace detail {
void add_macs(std::uint64_t n) { g_macs += n; }
}  // namespace detail

namespace {

template <typename T>
std::shared_ptr<detail::Node<T>> new_leaf(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d < 1) throw DimensionError("tensor dims must be >= 1, got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = detail::next_node_id();
  return node;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_leaf<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), value),
                            requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  return Tensor(new_leaf<T>(std::move(shape), std::move(data), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = flag;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(new_leaf<T>(node_->shape, node_->data, false));
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (defined() ? shape_str(shape()) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that is not on the tape");

  std::vector<detail::Node<T>*> order;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  // Ids increase with creation, so descending id is a reverse topological order.
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto* n : order) {
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    // Intermediate gradients are not needed after propagation.
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, OpKind op, std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->id = next_node_id();
  bool any = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) any = any || in->requires_grad;
  }
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(Shape, std::vector<float>, OpKind, std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, OpKind, std::vector<std::shared_ptr<Node<double>>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template <typename T>
std::string first_non_finite(const Tensor<T>& root) {
  if (!root.defined()) return {};
  std::vector<const detail::Node<T>*> nodes;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<const detail::Node<T>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->id < b->id; });
  for (auto* n : nodes) {
    for (std::size_t i = 0; i < n->data.size(); ++i) {
      if (!std::isfinite(n->data[i])) {
        std::ostringstream os;
        os << "tensor #" << n->id << " (op " << op_name(n->op) << ", shape " << shape_str(n->shape)
           << ") holds non-finite value at flat index " << i;
        return os.str();
      }
    }
  }
  return {};
}

template std::string first_non_finite(const Tensor<float>&);
template std::string first_non_finite(const Tensor<double>&);

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mpvit
