#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mpvit/tensor.hpp"

namespace mpvit {

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// floor((in - k + 2p) / s + 1); throws GeometryError when k > in + 2p.
std::int64_t conv_output_size(std::int64_t in, int kernel, int stride, int padding);

// x [N,Cin,H,W], weight [Cout,Cin/g,k,k], optional bias [Cout] (pass an
// undefined tensor for none). Zero padding, im2col + GEMM per group.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dParams params);

// a [...,M,K] x b [...,K,P]. Leading batch dims must match, or one side is 2-D
// and is shared across the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// y = x w + b over the last axis: x [...,in], w [in,out], b [out] optional.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Max-subtracted softmax along axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis);

enum class NormKind { kBatch, kLayer };

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  T momentum = T(0.1);
};

// Per-channel standardisation of x [N,C,...] over every axis but 1. Training
// mode uses batch statistics and updates `stats`; eval mode reads them.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     RunningStats<T>& stats, bool training);

// Per-row standardisation over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                    RunningStats<T>* stats, bool training);

enum class ActKind { kHardswish, kGelu };

// hardswish(x) = x * clamp(x + 3, 0, 6) / 6; derivative at x = -3 and x = 3
// takes the right limit. gelu uses the tanh approximation.
template <typename T>
Tensor<T> activation(const Tensor<T>& x, ActKind kind);

template <typename T>
Tensor<T> hardswish(const Tensor<T>& x) {
  return activation(x, ActKind::kHardswish);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return activation(x, ActKind::kGelu);
}

enum class ReduceKind { kSum, kMean };

// Collapses the listed axes (removed from the shape). Reducing every axis
// yields shape [1].
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, ReduceKind kind, std::vector<int> axes);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  return concat(std::span<const Tensor<T>>(parts), axis);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t begin, std::int64_t length);

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b);

// Elementwise; shapes must match exactly.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// Sum of any number of same-shape tensors in argument order.
template <typename T>
Tensor<T> add_n(std::span<const Tensor<T>> parts);

// Mean negative log-likelihood of log-probabilities [N,K] at integer labels.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const int> labels);

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  return nll_loss(log_softmax(logits, -1), labels);
}

// [N,C,H,W] -> [N,H*W,C] and back.
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::int64_t height, std::int64_t width);

}  // namespace mpvit
