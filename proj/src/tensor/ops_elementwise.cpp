#include <cmath>
#include <numbers>
#include <string>

#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  detail::require_defined(a, op, "lhs");
  detail::require_defined(b, op, "rhs");
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

template <typename T>
T hardswish_value(T x) {
  if (x <= T(-3)) return T(0);
  if (x >= T(3)) return x;
  return x * (x + T(3)) / T(6);
}

// Right-limit convention at both kinks.
template <typename T>
T hardswish_slope(T x) {
  if (x < T(-3)) return T(0);
  if (x >= T(3)) return T(1);
  return (T(2) * x + T(3)) / T(6);
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
T gelu_value(T x) {
  const T t = std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x));
  return T(0.5) * x * (T(1) + t);
}

template <typename T>
T gelu_slope(T x) {
  const T u = kGeluC<T> * (x + kGeluA<T> * x * x * x);
  const T t = std::tanh(u);
  const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace

template <typename T>
Tensor<T> activation(const Tensor<T>& x, ActKind kind) {
  detail::require_defined(x, "activation", "input");
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  if (kind == ActKind::kHardswish) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = hardswish_value(xd[i]);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xd[i]);
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::kActivation, {xn},
                                [xn, kind](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  const T* xd = xn->data.data();
                                  const std::size_t n = xn->data.size();
                                  if (kind == ActKind::kHardswish) {
                                    for (std::size_t i = 0; i < n; ++i) xn->grad[i] += self.grad[i] * hardswish_slope(xd[i]);
                                  } else {
                                    for (std::size_t i = 0; i < n; ++i) xn->grad[i] += self.grad[i] * gelu_slope(xd[i]);
                                  }
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::kAdd, {an, bn}, [an, bn](detail::Node<T>& self) {
    for (auto* in : {an.get(), bn.get()}) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_n(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("add_n: no operands");
  for (const auto& p : parts) check_same_shape(parts[0], p, "add_n");
  std::vector<T> out(parts[0].data().begin(), parts[0].data().end());
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const T* d = parts[k].data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  auto captured = inputs;
  return detail::make_result<T>(parts[0].shape(), std::move(out), OpKind::kAdd, std::move(inputs),
                                [captured](detail::Node<T>& self) {
                                  for (const auto& in : captured) {
                                    if (!in->requires_grad) continue;
                                    in->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::kMul, {an, bn}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  detail::require_defined(x, "scale", "input");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::kScale, {xn},
                                [xn, factor](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * factor;
                                });
}

#define MPVIT_INSTANTIATE_ELEMENTWISE(T)                                  \
  template Tensor<T> activation(const Tensor<T>&, ActKind);               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add_n(std::span<const Tensor<T>>);                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> scale(const Tensor<T>&, T);

MPVIT_INSTANTIATE_ELEMENTWISE(float)
MPVIT_INSTANTIATE_ELEMENTWISE(double)

}  // namespace mpvit
