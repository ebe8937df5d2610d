#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mpvit/tensor.hpp"

namespace mpvit {

template <typename T>
struct GradCheckOptions {
  T eps = T(1e-5);
  // 0 checks every element; otherwise an evenly strided subset of each input.
  std::size_t max_samples_per_input = 0;
  // Elements for which this returns true are not compared (e.g. kinks).
  std::function<bool(std::size_t input, std::size_t element, T value)> skip;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of a scalar closure against central
// differences (f(x+eps) - f(x-eps)) / 2eps. Relative error per element is
// |a - n| / max(|a|, |n|, 1e-8). Inputs must be leaves with requires_grad.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& closure, std::vector<Tensor<T>> inputs,
                           const GradCheckOptions<T>& options = {});

}  // namespace mpvit
