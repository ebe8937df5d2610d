#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mpvit/tensor.hpp"

namespace mpvit::detail {

void add_macs(std::uint64_t n);

inline int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(r));
  }
  return a;
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.len = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
inline void require_defined(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.defined()) throw ContractError(std::string(op) + ": " + what + " is undefined");
}

}  // namespace mpvit::detail
