#include "mpvit/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mpvit {

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& closure, std::vector<Tensor<T>> inputs,
                           const GradCheckOptions<T>& options) {
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw ContractError("grad_check: every input must require grad");
    in.zero_grad();
  }
  {
    auto loss = closure();
    if (loss.numel() != 1) throw ContractError("grad_check: closure must return a scalar");
    loss.backward();
  }
  std::vector<std::vector<T>> analytic;
  for (auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.numel(), T(0));
    }
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    const std::size_t n = data.size();
    std::size_t stride = 1;
    if (options.max_samples_per_input > 0 && n > options.max_samples_per_input) {
      stride = (n + options.max_samples_per_input - 1) / options.max_samples_per_input;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const T original = data[i];
      if (options.skip && options.skip(k, i, original)) continue;
      data[i] = original + options.eps;
      const double plus = static_cast<double>(closure().item());
      data[i] = original - options.eps;
      const double minus = static_cast<double>(closure().item());
      data[i] = original;
      // Use the perturbation actually representable in T.
      const double step = static_cast<double>(static_cast<T>(original + options.eps)) -
                          static_cast<double>(static_cast<T>(original - options.eps));
      const double numeric = (plus - minus) / step;
      const double a = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (result.checked == 1 || rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_input = k;
        result.worst_element = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template GradCheckResult grad_check(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>,
                                    const GradCheckOptions<float>&);
template GradCheckResult grad_check(const std::function<Tensor<double>()>&, std::vector<Tensor<double>>,
                                    const GradCheckOptions<double>&);

}  // namespace mpvit
