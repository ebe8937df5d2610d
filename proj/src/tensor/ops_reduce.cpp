#include <algorithm>
#include <cmath>
#include <string>

#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

namespace {

// Maps every input flat index to its output flat index after dropping `drop`.
std::vector<std::int64_t> reduction_index(const Shape& shape, const std::vector<bool>& drop, Shape& out_shape) {
  out_shape.clear();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!drop[i]) out_shape.push_back(shape[i]);
  }
  std::vector<std::int64_t> out_stride(shape.size(), 0);
  std::int64_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!drop[i]) {
      out_stride[i] = s;
      s *= shape[i];
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const std::int64_t total = shape_numel(shape);
  std::vector<std::int64_t> index(static_cast<std::size_t>(total));
  std::vector<std::int64_t> counter(shape.size(), 0);
  std::int64_t dst = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    index[static_cast<std::size_t>(flat)] = dst;
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      if (++counter[ax] < shape[ax]) {
        dst += out_stride[ax];
        break;
      }
      dst -= out_stride[ax] * (shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, ReduceKind kind, std::vector<int> axes) {
  detail::require_defined(x, "reduce", "input");
  std::vector<bool> drop(x.rank(), false);
  for (int a : axes) {
    const int ax = detail::normalize_axis(a, x.rank(), "reduce");
    if (drop[static_cast<std::size_t>(ax)]) throw DimensionError("reduce: axis " + std::to_string(a) + " repeated");
    drop[static_cast<std::size_t>(ax)] = true;
  }
  std::int64_t count = 1;
  for (std::size_t i = 0; i < drop.size(); ++i) {
    if (drop[i]) count *= x.shape()[i];
  }
  Shape out_shape;
  auto index = reduction_index(x.shape(), drop, out_shape);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)), T(0));
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < index.size(); ++i) out[static_cast<std::size_t>(index[i])] += xd[i];
  const T factor = kind == ReduceKind::kMean ? T(1) / static_cast<T>(count) : T(1);
  if (kind == ReduceKind::kMean) {
    for (auto& v : out) v *= factor;
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), OpKind::kReduce, {xn},
                                [xn, index = std::move(index), factor](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < index.size(); ++i) {
                                    xn->grad[i] += self.grad[static_cast<std::size_t>(index[i])] * factor;
                                  }
                                });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<int> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce(x, ReduceKind::kSum, axes);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  detail::require_defined(x, "softmax", "input");
  const int ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto s = detail::split_at(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T mx = xd[base];
      for (std::int64_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      T total = T(0);
      for (std::int64_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xd[base + l * s.inner] - mx);
        out[static_cast<std::size_t>(base + l * s.inner)] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t l = 0; l < s.len; ++l) out[static_cast<std::size_t>(base + l * s.inner)] *= inv;
    }
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::kSoftmax, {xn}, [xn, s](detail::Node<T>& self) {
    xn->ensure_grad();
    const T* y = self.data.data();
    const T* dy = self.grad.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.len * s.inner + in;
        T dot = T(0);
        for (std::int64_t l = 0; l < s.len; ++l) dot += dy[base + l * s.inner] * y[base + l * s.inner];
        for (std::int64_t l = 0; l < s.len; ++l) {
          const std::int64_t i = base + l * s.inner;
          xn->grad[static_cast<std::size_t>(i)] += y[i] * (dy[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  detail::require_defined(x, "log_softmax", "input");
  const int ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const auto s = detail::split_at(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T mx = xd[base];
      for (std::int64_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      T total = T(0);
      for (std::int64_t l = 0; l < s.len; ++l) total += std::exp(xd[base + l * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::int64_t l = 0; l < s.len; ++l) {
        out[static_cast<std::size_t>(base + l * s.inner)] = xd[base + l * s.inner] - lse;
      }
    }
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::kLogSoftmax, {xn},
                                [xn, s](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  const T* y = self.data.data();
                                  const T* dy = self.grad.data();
                                  for (std::int64_t o = 0; o < s.outer; ++o) {
                                    for (std::int64_t in = 0; in < s.inner; ++in) {
                                      const std::int64_t base = o * s.len * s.inner + in;
                                      T total = T(0);
                                      for (std::int64_t l = 0; l < s.len; ++l) total += dy[base + l * s.inner];
                                      for (std::int64_t l = 0; l < s.len; ++l) {
                                        const std::int64_t i = base + l * s.inner;
                                        xn->grad[static_cast<std::size_t>(i)] += dy[i] - std::exp(y[i]) * total;
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const int> labels) {
  detail::require_defined(log_probs, "nll_loss", "input");
  if (log_probs.rank() != 2) throw DimensionError("nll_loss: expected [N,K], got " + shape_str(log_probs.shape()));
  const std::int64_t n = log_probs.dim(0);
  const std::int64_t k = log_probs.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw DimensionError("nll_loss: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  T total = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (lab[static_cast<std::size_t>(i)] < 0 || lab[static_cast<std::size_t>(i)] >= k) {
      throw ContractError("nll_loss: label " + std::to_string(lab[static_cast<std::size_t>(i)]) + " outside [0," +
                          std::to_string(k) + ")");
    }
    total -= log_probs[static_cast<std::size_t>(i * k + lab[static_cast<std::size_t>(i)])];
  }
  auto xn = log_probs.node();
  return detail::make_result<T>({1}, {total / static_cast<T>(n)}, OpKind::kNll, {xn},
                                [xn, lab = std::move(lab), n, k](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  const T g = self.grad[0] / static_cast<T>(n);
                                  for (std::int64_t i = 0; i < n; ++i) {
                                    xn->grad[static_cast<std::size_t>(i * k + lab[static_cast<std::size_t>(i)])] -= g;
                                  }
                                });
}

#define MPVIT_INSTANTIATE_REDUCE(T)                                          \
  template Tensor<T> reduce(const Tensor<T>&, ReduceKind, std::vector<int>); \
  template Tensor<T> sum_all(const Tensor<T>&);                              \
  template Tensor<T> softmax(const Tensor<T>&, int);                         \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                     \
  template Tensor<T> nll_loss(const Tensor<T>&, std::span<const int>);

MPVIT_INSTANTIATE_REDUCE(float)
MPVIT_INSTANTIATE_REDUCE(double)

}  // namespace mpvit
