#include "mpvit/layers.hpp"

#include <cmath>

#include "mpvit/errors.hpp"

namespace mpvit {

template <typename T>
std::vector<Tensor<T>> ParamSet<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& item : items_) {
    if (item.trainable) out.push_back(item.tensor);
  }
  return out;
}

template <typename T>
std::int64_t ParamSet<T>::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& item : items_) {
    if (item.trainable) n += static_cast<std::int64_t>(item.tensor.numel());
  }
  return n;
}

template <typename T>
const NamedTensor<T>* ParamSet<T>::find(const std::string& name) const {
  for (const auto& item : items_) {
    if (item.name == name) return &item;
  }
  return nullptr;
}

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double sigma) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(sigma));
  return Tensor<T>::from_data(std::move(shape), std::move(v), true);
}

template <typename T>
Linear<T>::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias)
    : weight(trunc_normal<T>(rng, {in, out})) {
  if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
void Linear<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight);
  if (bias.defined()) set.add(prefix + ".bias", bias);
}

template <typename T>
Conv2d<T>::Conv2d(std::int64_t in, std::int64_t out, int kernel, Conv2dParams p, Rng& rng, bool with_bias)
    : weight(trunc_normal<T>(rng, {out, in / p.groups, kernel, kernel})), params(p) {
  if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
void Conv2d<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight);
  if (bias.defined()) set.add(prefix + ".bias", bias);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels)
    : gamma(Tensor<T>::full({channels}, T(1), true)), beta(Tensor<T>::zeros({channels}, true)) {
  stats.mean = Tensor<T>::zeros({channels});
  stats.var = Tensor<T>::full({channels}, T(1));
}

template <typename T>
void BatchNorm2d<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", gamma);
  set.add(prefix + ".bias", beta);
  set.add(prefix + ".running_mean", stats.mean, false);
  set.add(prefix + ".running_var", stats.var, false);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::int64_t channels)
    : gamma(Tensor<T>::full({channels}, T(1), true)), beta(Tensor<T>::zeros({channels}, true)) {}

template <typename T>
void LayerNorm<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", gamma);
  set.add(prefix + ".bias", beta);
}

template <typename T>
ConvBnAct<T>::ConvBnAct(std::int64_t in, std::int64_t out, int kernel, Conv2dParams params, Rng& rng, bool act)
    : conv(in, out, kernel, params, rng, false), bn(out), activate(act) {}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x, bool training) {
  auto y = bn.forward(conv.forward(x), training);
  return activate ? hardswish(y) : y;
}

template <typename T>
void ConvBnAct<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  conv.collect(set, prefix + ".conv");
  bn.collect(set, prefix + ".bn");
}

template <typename T>
DwSeparableConv<T>::DwSeparableConv(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, Rng& rng)
    : depthwise(in, in, kernel, {stride, padding, static_cast<int>(in)}, rng, false),
      pointwise(in, out, 1, {1, 0, 1}, rng, false),
      bn(out) {}

template <typename T>
Tensor<T> DwSeparableConv<T>::forward(const Tensor<T>& x, bool training) {
  return hardswish(bn.forward(pointwise.forward(depthwise.forward(x)), training));
}

template <typename T>
void DwSeparableConv<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  depthwise.collect(set, prefix + ".dw");
  pointwise.collect(set, prefix + ".pw");
  bn.collect(set, prefix + ".bn");
}

template <typename T>
ConvPosEnc<T>::ConvPosEnc(std::int64_t channels, Rng& rng)
    : conv(channels, channels, 3, {1, 1, static_cast<int>(channels)}, rng, true) {}

template <typename T>
void ConvPosEnc<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  conv.collect(set, prefix + ".proj");
}

template <typename T>
FactorizedAttention<T>::FactorizedAttention(std::int64_t channels, int h, Rng& rng) : heads(h) {
  if (h < 1 || channels % h != 0) {
    throw ConfigError("attention: channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(h));
  }
  query = Linear<T>(channels, channels, rng);
  key = Linear<T>(channels, channels, rng);
  value = Linear<T>(channels, channels, rng);
  proj = Linear<T>(channels, channels, rng);
}

template <typename T>
Tensor<T> FactorizedAttention<T>::forward(const Tensor<T>& tokens, AttentionTap<T>* tap) const {
  if (tokens.rank() != 3) throw DimensionError("attention: expected [B,N,C], got " + shape_str(tokens.shape()));
  const std::int64_t b = tokens.dim(0);
  const std::int64_t n = tokens.dim(1);
  const std::int64_t c = tokens.dim(2);
  const std::int64_t d = c / heads;
  auto split_heads = [&](const Tensor<T>& t) { return permute(reshape(t, {b, n, heads, d}), {0, 2, 1, 3}); };
  auto q = split_heads(query.forward(tokens));
  auto k = split_heads(key.forward(tokens));
  auto v = split_heads(value.forward(tokens));
  auto k_soft = softmax(k, 2);
  if (tap != nullptr) tap->softmax_k = k_soft.detach();
  auto context = matmul(transpose(k_soft, 2, 3), v);  // [B,h,d,d]
  auto out = scale(matmul(q, context), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto merged = reshape(permute(out, {0, 2, 1, 3}), {b, n, c});
  return proj.forward(merged);
}

template <typename T>
void FactorizedAttention<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  query.collect(set, prefix + ".q");
  key.collect(set, prefix + ".k");
  value.collect(set, prefix + ".v");
  proj.collect(set, prefix + ".proj");
}

template <typename T>
Mlp<T>::Mlp(std::int64_t channels, int ratio, Rng& rng)
    : fc1(channels, channels * ratio, rng), fc2(channels * ratio, channels, rng) {}

template <typename T>
void Mlp<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  fc1.collect(set, prefix + ".fc1");
  fc2.collect(set, prefix + ".fc2");
}

template <typename T>
EncoderBlock<T>::EncoderBlock(std::int64_t channels, int heads, int mlp_ratio, Rng& rng)
    : cpe(channels, rng), norm1(channels), attn(channels, heads, rng), norm2(channels), mlp(channels, mlp_ratio, rng) {}

template <typename T>
Tensor<T> EncoderBlock<T>::forward(const Tensor<T>& tokens, std::int64_t height, std::int64_t width,
                                   AttentionTap<T>* tap) const {
  auto x = map_to_tokens(cpe.forward(tokens_to_map(tokens, height, width)));
  x = add(x, attn.forward(norm1.forward(x), tap));
  return add(x, mlp.forward(norm2.forward(x)));
}

template <typename T>
void EncoderBlock<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  cpe.collect(set, prefix + ".cpe");
  norm1.collect(set, prefix + ".norm1");
  attn.collect(set, prefix + ".attn");
  norm2.collect(set, prefix + ".norm2");
  mlp.collect(set, prefix + ".mlp");
}

#define MPVIT_INSTANTIATE_LAYERS(T)                                \
  template class ParamSet<T>;                                      \
  template Tensor<T> trunc_normal<T>(Rng&, Shape, double);         \
  template struct Linear<T>;                                       \
  template struct Conv2d<T>;                                       \
  template struct BatchNorm2d<T>;                                  \
  template struct LayerNorm<T>;                                    \
  template struct ConvBnAct<T>;                                    \
  template struct DwSeparableConv<T>;                              \
  template struct ConvPosEnc<T>;                                   \
  template struct FactorizedAttention<T>;                          \
  template struct Mlp<T>;                                          \
  template struct EncoderBlock<T>;

MPVIT_INSTANTIATE_LAYERS(float)
MPVIT_INSTANTIATE_LAYERS(double)

}  // namespace mpvit
