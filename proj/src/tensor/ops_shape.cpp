#include <algorithm>
#include <numeric>
#include <string>

#include "kernels.hpp"
#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

namespace {

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For each output position of the permuted tensor, the flat source index.
std::vector<std::int64_t> permutation_index(const Shape& in_shape, const std::vector<int>& order) {
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(order.size());
  std::vector<std::int64_t> src_stride(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(order[i])];
    src_stride[i] = in_strides[static_cast<std::size_t>(order[i])];
  }
  const std::int64_t total = shape_numel(out_shape);
  std::vector<std::int64_t> index(static_cast<std::size_t>(total));
  std::vector<std::int64_t> counter(order.size(), 0);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    index[static_cast<std::size_t>(flat)] = src;
    for (std::size_t ax = order.size(); ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require_defined(x, "reshape", "input");
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d < 1) throw DimensionError("reshape: dims must be >= 1, got " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), OpKind::kReshape, {xn},
                                [xn](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
  detail::require_defined(x, "permute", "input");
  if (order.size() != x.rank()) throw DimensionError("permute: order length must equal rank");
  std::vector<int> check = order;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check[i] != static_cast<int>(i)) throw DimensionError("permute: order is not a permutation");
  }
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = x.shape()[static_cast<std::size_t>(order[i])];
  auto index = permutation_index(x.shape(), order);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[index[i]];
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), OpKind::kPermute, {xn},
                                [xn, index = std::move(index)](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    xn->grad[static_cast<std::size_t>(index[i])] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  const int a = detail::normalize_axis(axis_a, x.rank(), "transpose");
  const int b = detail::normalize_axis(axis_b, x.rank(), "transpose");
  std::vector<int> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(a)], order[static_cast<std::size_t>(b)]);
  return permute(x, order);
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  for (const auto& p : parts) detail::require_defined(p, "concat", "input");
  const int ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < p.rank(); ++d) {
      if (static_cast<int>(d) != ax && p.shape()[d] != parts[0].shape()[d]) {
        throw DimensionError("concat: axis " + std::to_string(d) + " differs (" + std::to_string(p.shape()[d]) +
                             " vs " + std::to_string(parts[0].shape()[d]) + ")");
      }
    }
    out_shape[static_cast<std::size_t>(ax)] += p.shape()[static_cast<std::size_t>(ax)];
  }
  const auto outer_split = detail::split_at(out_shape, ax);
  const std::int64_t out_row = outer_split.len * outer_split.inner;
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t block = p.shape()[static_cast<std::size_t>(ax)] * outer_split.inner;
    const T* src = p.data().data();
    for (std::int64_t o = 0; o < outer_split.outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, out.data() + o * out_row + off);
    }
    off += block;
  }
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  auto captured = inputs;
  const std::int64_t outer = outer_split.outer;
  const std::int64_t inner = outer_split.inner;
  return detail::make_result<T>(std::move(out_shape), std::move(out), OpKind::kConcat, std::move(inputs),
                                [captured, offsets, outer, inner, out_row, ax](detail::Node<T>& self) {
                                  for (std::size_t k = 0; k < captured.size(); ++k) {
                                    auto& in = captured[k];
                                    if (!in->requires_grad) continue;
                                    in->ensure_grad();
                                    const std::int64_t block = in->shape[static_cast<std::size_t>(ax)] * inner;
                                    for (std::int64_t o = 0; o < outer; ++o) {
                                      const T* g = self.grad.data() + o * out_row + offsets[k];
                                      T* dst = in->grad.data() + o * block;
                                      for (std::int64_t i = 0; i < block; ++i) dst[i] += g[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t begin, std::int64_t length) {
  detail::require_defined(x, "slice", "input");
  const int ax = detail::normalize_axis(axis, x.rank(), "slice");
  const auto s = detail::split_at(x.shape(), ax);
  if (begin < 0 || length < 1 || begin + length > s.len) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(begin + length) +
                         ") outside axis " + std::to_string(ax) + " of length " + std::to_string(s.len));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  const std::int64_t block = length * s.inner;
  const std::int64_t row = s.len * s.inner;
  const std::int64_t start = begin * s.inner;
  std::vector<T> out(static_cast<std::size_t>(s.outer * block));
  const T* xd = x.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy(xd + o * row + start, xd + o * row + start + block, out.data() + o * block);
  }
  auto xn = x.node();
  const std::int64_t outer = s.outer;
  return detail::make_result<T>(std::move(out_shape), std::move(out), OpKind::kSlice, {xn},
                                [xn, outer, block, row, start](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                    const T* g = self.grad.data() + o * block;
                                    T* dst = xn->grad.data() + o * row + start;
                                    for (std::int64_t i = 0; i < block; ++i) dst[i] += g[i];
                                  }
                                });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes) {
  const int ax = detail::normalize_axis(axis, x.rank(), "split");
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != x.dim(ax)) {
    throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(x.dim(ax)));
  }
  std::vector<Tensor<T>> parts;
  std::int64_t begin = 0;
  for (auto n : sizes) {
    parts.push_back(slice(x, ax, begin, n));
    begin += n;
  }
  return parts;
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  detail::require_defined(map, "map_to_tokens", "input");
  if (map.rank() != 4) throw DimensionError("map_to_tokens: expected [N,C,H,W], got " + shape_str(map.shape()));
  const std::int64_t n = map.dim(0);
  const std::int64_t c = map.dim(1);
  const std::int64_t hw = map.dim(2) * map.dim(3);
  std::vector<T> out(map.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    kernels::transpose(map.data().data() + b * c * hw, c, hw, out.data() + b * c * hw);
  }
  auto xn = map.node();
  return detail::make_result<T>({n, hw, c}, std::move(out), OpKind::kPermute, {xn},
                                [xn, n, c, hw](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  std::vector<T> tmp(static_cast<std::size_t>(c * hw));
                                  for (std::int64_t b = 0; b < n; ++b) {
                                    kernels::transpose(self.grad.data() + b * c * hw, hw, c, tmp.data());
                                    T* dst = xn->grad.data() + b * c * hw;
                                    for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
                                  }
                                });
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::int64_t height, std::int64_t width) {
  detail::require_defined(tokens, "tokens_to_map", "input");
  if (tokens.rank() != 3 || tokens.dim(1) != height * width) {
    throw DimensionError("tokens_to_map: expected [N," + std::to_string(height * width) + ",C], got " +
                         shape_str(tokens.shape()));
  }
  const std::int64_t n = tokens.dim(0);
  const std::int64_t c = tokens.dim(2);
  const std::int64_t hw = height * width;
  std::vector<T> out(tokens.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    kernels::transpose(tokens.data().data() + b * c * hw, hw, c, out.data() + b * c * hw);
  }
  auto xn = tokens.node();
  return detail::make_result<T>({n, c, height, width}, std::move(out), OpKind::kPermute, {xn},
                                [xn, n, c, hw](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  std::vector<T> tmp(static_cast<std::size_t>(c * hw));
                                  for (std::int64_t b = 0; b < n; ++b) {
                                    kernels::transpose(self.grad.data() + b * c * hw, c, hw, tmp.data());
                                    T* dst = xn->grad.data() + b * c * hw;
                                    for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
                                  }
                                });
}

#define MPVIT_INSTANTIATE_SHAPE(T)                                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                           \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                        \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                                      \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                     \
  template std::vector<Tensor<T>> split(const Tensor<T>&, int, const std::vector<std::int64_t>&); \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                              \
  template Tensor<T> tokens_to_map(const Tensor<T>&, std::int64_t, std::int64_t);

MPVIT_INSTANTIATE_SHAPE(float)
MPVIT_INSTANTIATE_SHAPE(double)

}  // namespace mpvit
