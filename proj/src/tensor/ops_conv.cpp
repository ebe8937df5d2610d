#include <algorithm>
#include <string>

#include "kernels.hpp"
#include "mpvit/ops.hpp"
#include "op_util.hpp"

namespace mpvit {

namespace {

struct ConvGeometry {
  std::int64_t batch, in_ch, height, width;
  std::int64_t out_ch, kh, kw;
  std::int64_t out_h, out_w;
  int stride, padding, groups;
  std::int64_t in_per_group() const { return in_ch / groups; }
  std::int64_t out_per_group() const { return out_ch / groups; }
  std::int64_t patch() const { return in_per_group() * kh * kw; }
  std::int64_t out_plane() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t plane = g.out_plane();
  for (std::int64_t c = 0; c < g.in_per_group(); ++c) {
    const T* xc = x + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = xc + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::int64_t plane = g.out_plane();
  for (std::int64_t c = 0; c < g.in_per_group(); ++c) {
    T* dxc = dx + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = dxc + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

std::int64_t conv_output_size(std::int64_t in, int kernel, int stride, int padding) {
  if (stride < 1) throw GeometryError("conv: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw GeometryError("conv: padding must be >= 0, got " + std::to_string(padding));
  if (kernel > in + 2 * static_cast<std::int64_t>(padding)) {
    throw GeometryError("conv: kernel " + std::to_string(kernel) + " exceeds padded extent " +
                        std::to_string(in + 2 * padding));
  }
  return (in - kernel + 2 * static_cast<std::int64_t>(padding)) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dParams params) {
  detail::require_defined(x, "conv2d", "input");
  detail::require_defined(weight, "conv2d", "weight");
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (weight.rank() != 4) {
    throw DimensionError("conv2d: weight must be [Cout,Cin/g,kh,kw], got " + shape_str(weight.shape()));
  }
  if (params.groups < 1) throw DimensionError("conv2d: groups must be >= 1");

  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_ch = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_ch = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = params.stride;
  g.padding = params.padding;
  g.groups = params.groups;

  if (g.in_ch % g.groups != 0) {
    throw DimensionError("conv2d: axis 1 (input channels " + std::to_string(g.in_ch) + ") not divisible by groups " +
                         std::to_string(g.groups));
  }
  if (g.out_ch % g.groups != 0) {
    throw DimensionError("conv2d: weight axis 0 (output channels " + std::to_string(g.out_ch) +
                         ") not divisible by groups " + std::to_string(g.groups));
  }
  if (weight.dim(1) != g.in_per_group()) {
    throw DimensionError("conv2d: weight axis 1 is " + std::to_string(weight.dim(1)) + " but input channels / groups is " +
                         std::to_string(g.in_per_group()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_ch)) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(g.out_ch) + "], got " + shape_str(bias.shape()));
  }
  g.out_h = conv_output_size(g.height, static_cast<int>(g.kh), g.stride, g.padding);
  g.out_w = conv_output_size(g.width, static_cast<int>(g.kw), g.stride, g.padding);

  const std::int64_t plane = g.out_plane();
  const std::int64_t in_img = g.in_ch * g.height * g.width;
  const std::int64_t out_img = g.out_ch * plane;
  const std::int64_t in_grp = g.in_per_group() * g.height * g.width;
  const std::int64_t w_grp = g.out_per_group() * g.patch();

  std::vector<T> out(static_cast<std::size_t>(g.batch * out_img));
  std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * plane));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = xd + n * in_img + grp * in_grp;
      const T* src = xg;
      if (!g.pointwise()) {
        im2col(xg, g, cols.data());
        src = cols.data();
      }
      T* og = out.data() + n * out_img + grp * g.out_per_group() * plane;
      kernels::gemm(false, false, g.out_per_group(), plane, g.patch(), wd + grp * w_grp, g.patch(), src, plane, og,
                    plane, false);
    }
    if (bias.defined()) {
      const T* bd = bias.data().data();
      for (std::int64_t c = 0; c < g.out_ch; ++c) {
        T* o = out.data() + n * out_img + c * plane;
        for (std::int64_t i = 0; i < plane; ++i) o[i] += bd[c];
      }
    }
  }
  detail::add_macs(static_cast<std::uint64_t>(g.batch * g.out_ch * g.patch() * plane));

  std::vector<detail::NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), OpKind::kConv2d, std::move(inputs),
      [xn, wn, bn, g, plane, in_img, out_img, in_grp, w_grp](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t n = 0; n < g.batch; ++n) {
            for (std::int64_t c = 0; c < g.out_ch; ++c) {
              const T* d = dy + n * out_img + c * plane;
              T acc = T(0);
              for (std::int64_t i = 0; i < plane; ++i) acc += d[i];
              bn->grad[static_cast<std::size_t>(c)] += acc;
            }
          }
        }
        const bool need_w = wn->requires_grad;
        const bool need_x = xn->requires_grad;
        if (need_w) wn->ensure_grad();
        if (need_x) xn->ensure_grad();
        std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * plane));
        std::vector<T> dcols(cols.size());
        for (std::int64_t n = 0; n < g.batch; ++n) {
          for (std::int64_t grp = 0; grp < g.groups; ++grp) {
            const T* dyg = dy + n * out_img + grp * g.out_per_group() * plane;
            const T* xg = xn->data.data() + n * in_img + grp * in_grp;
            if (need_w) {
              const T* src = xg;
              if (!g.pointwise()) {
                im2col(xg, g, cols.data());
                src = cols.data();
              }
              kernels::gemm(false, true, g.out_per_group(), g.patch(), plane, dyg, plane, src, plane,
                            wn->grad.data() + grp * w_grp, g.patch(), true);
            }
            if (need_x) {
              const T* wg = wn->data.data() + grp * w_grp;
              T* dxg = xn->grad.data() + n * in_img + grp * in_grp;
              if (g.pointwise()) {
                kernels::gemm(true, false, g.patch(), plane, g.out_per_group(), wg, g.patch(), dyg, plane, dxg, plane,
                              true);
              } else {
                kernels::gemm(true, false, g.patch(), plane, g.out_per_group(), wg, g.patch(), dyg, plane,
                              dcols.data(), plane, false);
                col2im_add(dcols.data(), g, dxg);
              }
            }
          }
        }
      });
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Conv2dParams);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Conv2dParams);

}  // namespace mpvit
