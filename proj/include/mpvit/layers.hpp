#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpvit/ops.hpp"
#include "mpvit/rng.hpp"
#include "mpvit/tensor.hpp"

namespace mpvit {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

// Ordered registry of a model's tensors. Entries alias the layer storage.
template <typename T>
class ParamSet {
 public:
  void add(std::string name, Tensor<T> tensor, bool trainable = true) {
    items_.push_back({std::move(name), std::move(tensor), trainable});
  }
  const std::vector<NamedTensor<T>>& items() const { return items_; }
  std::vector<Tensor<T>> trainable() const;
  // Total element count of trainable tensors.
  std::int64_t trainable_count() const;
  const NamedTensor<T>* find(const std::string& name) const;

 private:
  std::vector<NamedTensor<T>> items_;
};

inline constexpr double kInitSigma = 0.02;

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double sigma = kInitSigma);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true);
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [Cout, Cin/g, k, k]
  Tensor<T> bias;
  Conv2dParams params;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int kernel, Conv2dParams params, Rng& rng, bool with_bias);
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, params); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma;
  Tensor<T> beta;
  RunningStats<T> stats;
  T eps = T(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels);
  Tensor<T> forward(const Tensor<T>& x, bool training) { return batch_norm(x, gamma, beta, eps, stats, training); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t channels);
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Bias-free conv -> BatchNorm -> optional Hardswish.
template <typename T>
struct ConvBnAct {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  bool activate = true;

  ConvBnAct() = default;
  ConvBnAct(std::int64_t in, std::int64_t out, int kernel, Conv2dParams params, Rng& rng, bool activate = true);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// k x k depthwise conv, 1x1 pointwise conv, one BatchNorm, Hardswish.
template <typename T>
struct DwSeparableConv {
  Conv2d<T> depthwise;
  Conv2d<T> pointwise;
  BatchNorm2d<T> bn;

  DwSeparableConv() = default;
  DwSeparableConv(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Residual depthwise 3x3 conv on the token map: x + dwconv(x).
template <typename T>
struct ConvPosEnc {
  Conv2d<T> conv;

  ConvPosEnc() = default;
  ConvPosEnc(std::int64_t channels, Rng& rng);
  Tensor<T> forward(const Tensor<T>& map) const { return add(map, conv.forward(map)); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Receives softmax(K) of shape [B, heads, N, head_dim] when attached.
template <typename T>
struct AttentionTap {
  Tensor<T> softmax_k;
};

// Per head: Q/sqrt(d) (softmax_tokens(K)^T V), heads concatenated then
// projected. Cost is linear in the token count.
template <typename T>
struct FactorizedAttention {
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
  Linear<T> proj;
  int heads = 1;

  FactorizedAttention() = default;
  FactorizedAttention(std::int64_t channels, int heads, Rng& rng);
  std::int64_t head_dim() const { return query.weight.dim(1) / heads; }
  // tokens [B, N, C] -> [B, N, C]
  Tensor<T> forward(const Tensor<T>& tokens, AttentionTap<T>* tap = nullptr) const;
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(std::int64_t channels, int ratio, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Pre-norm transformer encoder block with a conv position encoding:
//   x <- cpe(x);  x <- x + attn(LN(x));  x <- x + mlp(LN(x))
template <typename T>
struct EncoderBlock {
  ConvPosEnc<T> cpe;
  LayerNorm<T> norm1;
  FactorizedAttention<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;

  EncoderBlock() = default;
  EncoderBlock(std::int64_t channels, int heads, int mlp_ratio, Rng& rng);
  // tokens [B, H*W, C]
  Tensor<T> forward(const Tensor<T>& tokens, std::int64_t height, std::int64_t width,
                    AttentionTap<T>* tap = nullptr) const;
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
std::int64_t param_count(const ParamSet<T>& set) {
  return set.trainable_count();
}

}  // namespace mpvit
