#include <algorithm>

#include <Eigen/Dense>

#include "avatar/autodiff.hpp"
#include "dispatch.hpp"

namespace av::ad {

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const Mat<T>>;

struct ConvDims {
  std::size_t B, C, H, W, O, K, Ho, Wo;
};

std::size_t out_extent(std::size_t in, std::size_t k, Conv2dGeometry g) {
  if (in + 2 * g.pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * g.pad - k) / g.stride + 1;
}

// Unfolds x (B,C,H,W) into columns (C*K*K, B*Ho*Wo); padded taps are zero.
template <class T>
Mat<T> im2col(std::span<const T> x, const ConvDims& d, Conv2dGeometry g) {
  const std::size_t N = d.Ho * d.Wo;
  Mat<T> cols = Mat<T>::Zero(static_cast<Eigen::Index>(d.C * d.K * d.K), static_cast<Eigen::Index>(d.B * N));
  for (std::size_t c = 0; c < d.C; ++c)
    for (std::size_t kh = 0; kh < d.K; ++kh)
      for (std::size_t kw = 0; kw < d.K; ++kw) {
        T* row = cols.row(static_cast<Eigen::Index>((c * d.K + kh) * d.K + kw)).data();
        for (std::size_t b = 0; b < d.B; ++b) {
          const T* xp = &x[(b * d.C + c) * d.H * d.W];
          for (std::size_t oh = 0; oh < d.Ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
            for (std::size_t ow = 0; ow < d.Wo; ++ow) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
              row[b * N + oh * d.Wo + ow] = xp[ih * d.W + iw];
            }
          }
        }
      }
  return cols;
}

// Adjoint of im2col: scatters columns back into (B,C,H,W).
template <class T>
std::vector<T> col2im(const Mat<T>& cols, const ConvDims& d, Conv2dGeometry g) {
  const std::size_t N = d.Ho * d.Wo;
  std::vector<T> x(d.B * d.C * d.H * d.W, T(0));
  for (std::size_t c = 0; c < d.C; ++c)
    for (std::size_t kh = 0; kh < d.K; ++kh)
      for (std::size_t kw = 0; kw < d.K; ++kw) {
        const T* row = cols.row(static_cast<Eigen::Index>((c * d.K + kh) * d.K + kw)).data();
        for (std::size_t b = 0; b < d.B; ++b) {
          T* xp = &x[(b * d.C + c) * d.H * d.W];
          for (std::size_t oh = 0; oh < d.Ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
            for (std::size_t ow = 0; ow < d.Wo; ++ow) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
              xp[ih * d.W + iw] += row[b * N + oh * d.Wo + ow];
            }
          }
        }
      }
  return x;
}

// (B,O,Ho,Wo) <-> (O, B*Ho*Wo)
template <class T>
Mat<T> to_channel_major(std::span<const T> y, const ConvDims& d) {
  const std::size_t N = d.Ho * d.Wo;
  Mat<T> m(static_cast<Eigen::Index>(d.O), static_cast<Eigen::Index>(d.B * N));
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t o = 0; o < d.O; ++o)
      std::copy_n(&y[(b * d.O + o) * N], N, m.row(static_cast<Eigen::Index>(o)).data() + b * N);
  return m;
}

template <class T>
std::vector<T> from_channel_major(const Mat<T>& m, const ConvDims& d) {
  const std::size_t N = d.Ho * d.Wo;
  std::vector<T> y(d.B * d.O * N);
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t o = 0; o < d.O; ++o)
      std::copy_n(m.row(static_cast<Eigen::Index>(o)).data() + b * N, N, &y[(b * d.O + o) * N]);
  return y;
}

template <class T>
ConstMap<T> weight_matrix(std::span<const T> w, const ConvDims& d) {
  return {w.data(), static_cast<Eigen::Index>(d.O), static_cast<Eigen::Index>(d.C * d.K * d.K)};
}

template <class T>
std::vector<T> conv_forward(std::span<const T> x, std::span<const T> w, const ConvDims& d, Conv2dGeometry g) {
  const Mat<T> y = weight_matrix(w, d) * im2col(x, d, g);
  return from_channel_major(y, d);
}

template <class T>
std::vector<T> conv_input_grad(std::span<const T> gy, std::span<const T> w, const ConvDims& d, Conv2dGeometry g) {
  const Mat<T> cols = weight_matrix(w, d).transpose() * to_channel_major(gy, d);
  return col2im(cols, d, g);
}

template <class T>
std::vector<T> conv_weight_grad(std::span<const T> x, std::span<const T> gy, const ConvDims& d, Conv2dGeometry g) {
  const Mat<T> gw = to_channel_major(gy, d) * im2col(x, d, g).transpose();
  return std::vector<T>(gw.data(), gw.data() + gw.size());
}

ConvDims dims_from_input(const Tensor& x, const Tensor& w, Conv2dGeometry g) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  if (g.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0};
  d.Ho = out_extent(d.H, d.K, g);
  d.Wo = out_extent(d.W, d.K, g);
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry g) {
  require_same_dtype(x, weight, "conv2d");
  const ConvDims d = dims_from_input(x, weight, g);
  Tensor y = dispatch(x.dtype(), [&]<class T>() {
    return make_tensor<T>({d.B, d.O, d.Ho, d.Wo}, conv_forward<T>(x.data<T>(), weight.data<T>(), d, g), "conv2d");
  });
  y = maybe_record("conv2d", {x, weight}, y, [x, weight, d, g](const Tensor& gy, const auto& needs, bool graph) {
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = conv2d_input_grad(gy, saved(weight, graph), d.H, d.W, g);
    if (needs[1]) r[1] = conv2d_weight_grad(saved(x, graph), gy, d.K, g);
    return r;
  });
  if (bias.defined()) y = add_channel_bias(y, bias);
  return y;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, std::size_t in_h, std::size_t in_w,
                         Conv2dGeometry g) {
  require_same_dtype(grad_out, weight, "conv2d_input_grad");
  if (grad_out.rank() != 4 || weight.rank() != 4 || grad_out.dim(1) != weight.dim(0))
    throw ShapeError("conv2d_input_grad: shape mismatch");
  ConvDims d{grad_out.dim(0), weight.dim(1), in_h, in_w, weight.dim(0), weight.dim(2), 0, 0};
  d.Ho = out_extent(in_h, d.K, g);
  d.Wo = out_extent(in_w, d.K, g);
  if (d.Ho != grad_out.dim(2) || d.Wo != grad_out.dim(3)) throw ShapeError("conv2d_input_grad: spatial mismatch");
  Tensor out = dispatch(weight.dtype(), [&]<class T>() {
    return make_tensor<T>({d.B, d.C, d.H, d.W}, conv_input_grad<T>(grad_out.data<T>(), weight.data<T>(), d, g),
                          "conv2d_input_grad");
  });
  return maybe_record("conv2d_input_grad", {grad_out, weight}, out,
                      [grad_out, weight, d, g](const Tensor& up, const auto& needs, bool graph) {
                        // <up, T(gy, w)> = <conv(up, w), gy>
                        std::vector<Tensor> r(2);
                        if (needs[0]) r[0] = conv2d(up, saved(weight, graph), {}, g);
                        if (needs[1]) r[1] = conv2d_weight_grad(up, saved(grad_out, graph), d.K, g);
                        return r;
                      });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t k, Conv2dGeometry g) {
  require_same_dtype(x, grad_out, "conv2d_weight_grad");
  if (x.rank() != 4 || grad_out.rank() != 4 || x.dim(0) != grad_out.dim(0))
    throw ShapeError("conv2d_weight_grad: shape mismatch");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), grad_out.dim(1), k, 0, 0};
  d.Ho = out_extent(d.H, k, g);
  d.Wo = out_extent(d.W, k, g);
  if (d.Ho != grad_out.dim(2) || d.Wo != grad_out.dim(3)) throw ShapeError("conv2d_weight_grad: spatial mismatch");
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    return make_tensor<T>({d.O, d.C, k, k}, conv_weight_grad<T>(x.data<T>(), grad_out.data<T>(), d, g),
                          "conv2d_weight_grad");
  });
  return maybe_record("conv2d_weight_grad", {x, grad_out}, out,
                      [x, grad_out, d, g](const Tensor& up, const auto& needs, bool graph) {
                        // <up, WG(x, gy)> = <conv(x, up), gy>
                        std::vector<Tensor> r(2);
                        if (needs[0]) r[0] = conv2d_input_grad(saved(grad_out, graph), up, d.H, d.W, g);
                        if (needs[1]) r[1] = conv2d(saved(x, graph), up, {}, g);
                        return r;
                      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_same_dtype(x, bias, "add_channel_bias");
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError("add_channel_bias: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto bd = bias.data<T>();
    std::vector<T> o(xd.size());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (b * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) o[off + i] = xd[off + i] + bd[c];
      }
    return make_tensor<T>(x.shape(), std::move(o), "add_channel_bias");
  });
  return maybe_record("add_channel_bias", {x, bias}, out, [](const Tensor& g, const auto& needs, bool) {
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = g;
    if (needs[1]) r[1] = channel_sum(g);
    return r;
  });
}

Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum expects rank >= 2");
  const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    std::vector<double> acc(C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (b * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) acc[c] += static_cast<double>(xd[off + i]);
      }
    return make_tensor<T>({C}, std::vector<T>(acc.begin(), acc.end()), "channel_sum");
  });
  return maybe_record("channel_sum", {x}, out, [s = x.shape(), dt = x.dtype()](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{add_channel_bias(Tensor::zeros(s, dt), g)};
  });
}

}  // namespace av::ad
