#include <cmath>
#include <string>

#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

namespace {

template <typename T>
void check_affine(const Tensor<T>& gamma, const Tensor<T>& beta, std::int64_t channels, const char* op) {
  detail::require_defined(gamma, op, "gamma");
  detail::require_defined(beta, op, "beta");
  if (gamma.numel() != static_cast<std::size_t>(channels) || beta.numel() != static_cast<std::size_t>(channels)) {
    throw DimensionError(std::string(op) + ": gamma/beta length must equal normalized channels " +
                         std::to_string(channels));
  }
}

}  // namespace

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     RunningStats<T>& stats, bool training) {
  detail::require_defined(x, "batch_norm", "input");
  if (x.rank() < 2) throw DimensionError("batch_norm: input must be [N,C,...], got " + shape_str(x.shape()));
  if (eps < T(0)) throw ContractError("batch_norm: eps must be >= 0");
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  const std::int64_t spatial = static_cast<std::int64_t>(x.numel()) / (n * c);
  check_affine(gamma, beta, c, "batch_norm");
  if (!stats.mean.defined()) stats.mean = Tensor<T>::zeros({c});
  if (!stats.var.defined()) stats.var = Tensor<T>::full({c}, T(1));

  const std::int64_t count = n * spatial;
  std::vector<T> mean(static_cast<std::size_t>(c));
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  const T* xd = x.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu;
    T var;
    if (training) {
      T s = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xd + (b * c + ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) s += p[i];
      }
      mu = s / static_cast<T>(count);
      T sq = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xd + (b * c + ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(count);
      auto& rm = stats.mean.mutable_data()[static_cast<std::size_t>(ch)];
      auto& rv = stats.var.mutable_data()[static_cast<std::size_t>(ch)];
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      rm = (T(1) - stats.momentum) * rm + stats.momentum * mu;
      rv = (T(1) - stats.momentum) * rv + stats.momentum * unbiased;
    } else {
      mu = stats.mean[static_cast<std::size_t>(ch)];
      var = stats.var[static_cast<std::size_t>(ch)];
    }
    if (var + eps <= T(0)) {
      throw DivisionGuardError("batch_norm: channel " + std::to_string(ch) + " has zero variance and eps = 0");
    }
    mean[static_cast<std::size_t>(ch)] = mu;
    inv_std[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var + eps);
  }

  std::vector<T> out(x.numel());
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T mu = mean[static_cast<std::size_t>(ch)];
      const T is = inv_std[static_cast<std::size_t>(ch)];
      const T* p = xd + (b * c + ch) * spatial;
      T* o = out.data() + (b * c + ch) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) o[i] = (p[i] - mu) * is * gd[ch] + bd[ch];
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), OpKind::kBatchNorm, {xn, gn, bn},
      [xn, gn, bn, n, c, spatial, count, mean, inv_std, training](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        const T* xd = xn->data.data();
        const T* gd = gn->data.data();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = mean[static_cast<std::size_t>(ch)];
          const T is = inv_std[static_cast<std::size_t>(ch)];
          T sum_dy = T(0);
          T sum_dy_xhat = T(0);
          for (std::int64_t b = 0; b < n; ++b) {
            const T* p = xd + (b * c + ch) * spatial;
            const T* d = dy + (b * c + ch) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (p[i] - mu) * is;
            }
          }
          if (gn->requires_grad) gn->grad[static_cast<std::size_t>(ch)] += sum_dy_xhat;
          if (bn->requires_grad) bn->grad[static_cast<std::size_t>(ch)] += sum_dy;
          if (!xn->requires_grad) continue;
          const T g = gd[ch];
          for (std::int64_t b = 0; b < n; ++b) {
            const T* p = xd + (b * c + ch) * spatial;
            const T* d = dy + (b * c + ch) * spatial;
            T* dx = xn->grad.data() + (b * c + ch) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              if (training) {
                const T xhat = (p[i] - mu) * is;
                dx[i] += g * is * (d[i] - sum_dy / static_cast<T>(count) - xhat * sum_dy_xhat / static_cast<T>(count));
              } else {
                dx[i] += g * is * d[i];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require_defined(x, "layer_norm", "input");
  if (eps < T(0)) throw ContractError("layer_norm: eps must be >= 0");
  const std::int64_t c = x.dim(-1);
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / c;
  check_affine(gamma, beta, c, "layer_norm");
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  std::vector<T> xhat(x.numel());
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = xd + r * c;
    T s = T(0);
    for (std::int64_t i = 0; i < c; ++i) s += p[i];
    const T mu = s / static_cast<T>(c);
    T sq = T(0);
    for (std::int64_t i = 0; i < c; ++i) sq += (p[i] - mu) * (p[i] - mu);
    const T var = sq / static_cast<T>(c);
    if (var + eps <= T(0)) {
      throw DivisionGuardError("layer_norm: row " + std::to_string(r) + " has zero variance and eps = 0");
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < c; ++i) {
      const T h = (p[i] - mu) * is;
      xhat[static_cast<std::size_t>(r * c + i)] = h;
      out[static_cast<std::size_t>(r * c + i)] = h * gd[i] + bd[i];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), OpKind::kLayerNorm, {xn, gn, bn},
      [xn, gn, bn, rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        const T* gd = gn->data.data();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* d = dy + r * c;
          const T* h = xhat.data() + r * c;
          T sum_g = T(0);
          T sum_gh = T(0);
          for (std::int64_t i = 0; i < c; ++i) {
            if (gn->requires_grad) gn->grad[static_cast<std::size_t>(i)] += d[i] * h[i];
            if (bn->requires_grad) bn->grad[static_cast<std::size_t>(i)] += d[i];
            const T gdy = d[i] * gd[i];
            sum_g += gdy;
            sum_gh += gdy * h[i];
          }
          if (!xn->requires_grad) continue;
          const T is = inv_std[static_cast<std::size_t>(r)];
          T* dx = xn->grad.data() + r * c;
          const T inv_c = T(1) / static_cast<T>(c);
          for (std::int64_t i = 0; i < c; ++i) {
            dx[i] += is * (d[i] * gd[i] - sum_g * inv_c - h[i] * sum_gh * inv_c);
          }
        }
      });
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                    RunningStats<T>* stats, bool training) {
  if (kind == NormKind::kLayer) return layer_norm(x, gamma, beta, eps);
  if (stats == nullptr) throw ContractError("normalize: batch kind needs running stats");
  return batch_norm(x, gamma, beta, eps, *stats, training);
}

#define MPVIT_INSTANTIATE_NORM(T)                                                                             \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, RunningStats<T>&, \
                                bool);                                                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                   \
  template Tensor<T> normalize(const Tensor<T>&, NormKind, const Tensor<T>&, const Tensor<T>&, T,           \
                               RunningStats<T>*, bool);

MPVIT_INSTANTIATE_NORM(float)
MPVIT_INSTANTIATE_NORM(double)

}  // namespace mpvit
