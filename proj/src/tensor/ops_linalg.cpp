#include <string>

#include "kernels.hpp"
#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "matmul", "lhs");
  detail::require_defined(b, "matmul", "rhs");
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must be at least 2-D, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t kb = b.dim(-2);
  const std::int64_t p = b.dim(-1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " + std::to_string(kb) +
                         ") for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  bool shared_a = false;
  bool shared_b = false;
  if (lead_a == lead_b) {
    lead = lead_a;
  } else if (lead_b.empty()) {
    lead = lead_a;
    shared_b = true;
  } else if (lead_a.empty()) {
    lead = lead_b;
    shared_a = true;
  } else {
    throw DimensionError("matmul: batch dims " + shape_str(lead_a) + " and " + shape_str(lead_b) +
                         " are not compatible");
  }
  const std::int64_t batch = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(p);

  std::vector<T> out(static_cast<std::size_t>(batch * m * p));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    const T* ai = shared_a ? ad : ad + i * m * k;
    const T* bi = shared_b ? bd : bd + i * k * p;
    kernels::gemm(false, false, m, p, k, ai, k, bi, p, out.data() + i * m * p, p, false);
  }
  detail::add_macs(static_cast<std::uint64_t>(batch * m * k * p));

  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), OpKind::kMatmul, {an, bn},
      [an, bn, batch, m, k, p, shared_a, shared_b](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::int64_t i = 0; i < batch; ++i) {
            const T* bi = shared_b ? bn->data.data() : bn->data.data() + i * k * p;
            T* dai = shared_a ? an->grad.data() : an->grad.data() + i * m * k;
            kernels::gemm(false, true, m, k, p, dy + i * m * p, p, bi, p, dai, k, true);
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t i = 0; i < batch; ++i) {
            const T* ai = shared_a ? an->data.data() : an->data.data() + i * m * k;
            T* dbi = shared_b ? bn->grad.data() : bn->grad.data() + i * k * p;
            kernels::gemm(true, false, k, p, m, ai, k, dy + i * m * p, p, dbi, p, true);
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_defined(x, "linear", "input");
  detail::require_defined(weight, "linear", "weight");
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [in,out], got " + shape_str(weight.shape()));
  const std::int64_t in = weight.dim(0);
  const std::int64_t out_f = weight.dim(1);
  if (x.dim(-1) != in) {
    throw DimensionError("linear: last axis of input is " + std::to_string(x.dim(-1)) + ", weight expects " +
                         std::to_string(in));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw DimensionError("linear: bias must be [" + std::to_string(out_f) + "], got " + shape_str(bias.shape()));
  }
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<T> out(static_cast<std::size_t>(rows * out_f));
  kernels::gemm(false, false, rows, out_f, in, x.data().data(), in, weight.data().data(), out_f, out.data(), out_f,
                false);
  if (bias.defined()) {
    const T* bd = bias.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      T* o = out.data() + r * out_f;
      for (std::int64_t j = 0; j < out_f; ++j) o[j] += bd[j];
    }
  }
  detail::add_macs(static_cast<std::uint64_t>(rows * in * out_f));

  std::vector<detail::NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(std::move(out_shape), std::move(out), OpKind::kLinear, std::move(inputs),
                                [xn, wn, bn, rows, in, out_f](detail::Node<T>& self) {
                                  const T* dy = self.grad.data();
                                  if (xn->requires_grad) {
                                    xn->ensure_grad();
                                    kernels::gemm(false, true, rows, in, out_f, dy, out_f, wn->data.data(), out_f,
                                                  xn->grad.data(), in, true);
                                  }
                                  if (wn->requires_grad) {
                                    wn->ensure_grad();
                                    kernels::gemm(true, false, in, out_f, rows, xn->data.data(), in, dy, out_f,
                                                  wn->grad.data(), out_f, true);
                                  }
                                  if (bn && bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (std::int64_t r = 0; r < rows; ++r) {
                                      for (std::int64_t j = 0; j < out_f; ++j) bn->grad[j] += dy[r * out_f + j];
                                    }
                                  }
                                });
}

template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> linear(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> linear(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace mpvit
