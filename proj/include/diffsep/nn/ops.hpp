// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Differentiable operations on [C, F, T] feature maps and vectors.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffsep/nn/autograd.hpp"

namespace diffsep::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw Error(what);
}

struct ConvGeometry {
  std::size_t in_ch, in_h, in_w;
  std::size_t out_ch, k, stride_h, pad;
  std::size_t out_h, out_w;
};

// im2col for a k x k kernel, stride (stride_h, 1), zero padding `pad`.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = x + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          const long shift = static_cast<long>(kj) - static_cast<long>(g.pad);
          const long lo = std::clamp(-shift, 0L, static_cast<long>(g.out_w));
          const long hi = std::clamp(static_cast<long>(g.in_w) - shift, lo, static_cast<long>(g.out_w));
          std::fill(dst, dst + lo, T(0));
          std::copy(src + lo + shift, src + hi + shift, dst + lo);
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          T* dst = dx + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          const T* src = row + oh * g.out_w;
          const long shift = static_cast<long>(kj) - static_cast<long>(g.pad);
          const long lo = std::clamp(-shift, 0L, static_cast<long>(g.out_w));
          const long hi = std::clamp(static_cast<long>(g.in_w) - shift, lo, static_cast<long>(g.out_w));
          for (long ow = lo; ow < hi; ++ow) dst[ow + shift] += src[ow];
        }
      }
}

// Per-thread grow-only buffers for im2col columns; contents are unspecified.
template <typename T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) {
    b.clear();
    b.shrink_to_fit();
    b.resize(n);
  }
  return b.data();
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

}  // namespace detail

// 2-D convolution over [C_in, H, W] with a square kernel [C_out, C_in, k, k],
// stride (stride_h, 1) and "same" padding along W. `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride_h = 1) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  detail::require(xs.size() == 3 && ws.size() == 4 && ws[1] == xs[0] && ws[2] == ws[3],
                  "conv2d: shape mismatch");
  detail::ConvGeometry g{xs[0], xs[1], xs[2], ws[0], ws[2], stride_h, ws[2] / 2, 0, 0};
  g.out_h = (g.in_h + 2 * g.pad - g.k) / g.stride_h + 1;
  g.out_w = g.in_w + 2 * g.pad - g.k + 1;
  const std::size_t n = g.out_h * g.out_w;
  const std::size_t kdim = g.in_ch * g.k * g.k;
  const bool pointwise = g.k == 1 && g.stride_h == 1;

  Tensor<T> out({g.out_ch, g.out_h, g.out_w});
  {
    const T* colp = x.value().data();
    if (!pointwise) {
      T* cols = detail::scratch<T>(0, kdim * n);
      detail::im2col(x.value().data(), g, cols);
      colp = cols;
    }
    ConstMatMap<T> w(weight.value().data(), g.out_ch, kdim);
    ConstMatMap<T> c(colp, kdim, n);
    MatMap<T> o(out.data(), g.out_ch, n);
    o.noalias() = w * c;
    if (bias.defined())
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) o.row(oc).array() += bias.value()[oc];
  }

  const bool has_bias = bias.defined();
  return make_result<T>(std::move(out), {x, weight, has_bias ? bias : Var<T>()},
                        [g, n, kdim, pointwise, has_bias](Node<T>& self) {
    ConstMatMap<T> dout(self.grad.data(), g.out_ch, n);
    const Tensor<T>& xv = self.input_value(0);
    const Tensor<T>& wv = self.input_value(1);
    const T* colp = xv.data();
    if (!pointwise && self.wants_grad(1)) {
      T* cols = detail::scratch<T>(0, kdim * n);
      detail::im2col(xv.data(), g, cols);
      colp = cols;
    }
    if (self.wants_grad(1)) {
      MatMap<T> dw(self.input_grad(1).data(), g.out_ch, kdim);
      dw.noalias() += dout * ConstMatMap<T>(colp, kdim, n).transpose();
    }
    if (has_bias && self.wants_grad(2)) {
      Tensor<T>& db = self.input_grad(2);
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) db[oc] += dout.row(oc).sum();
    }
    if (self.wants_grad(0)) {
      ConstMatMap<T> w(wv.data(), g.out_ch, kdim);
      if (pointwise) {
        MatMap<T> dx(self.input_grad(0).data(), kdim, n);
        dx.noalias() += w.transpose() * dout;
      } else {
        T* dcols = detail::scratch<T>(1, kdim * n);
        MatMap<T> dc(dcols, kdim, n);
        dc.noalias() = w.transpose() * dout;
        detail::col2im(dcols, g, self.input_grad(0).data());
      }
    }
  });
}

// y = W x + b for a vector x [in], W [out, in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::size_t in = x.value().size();
  const std::size_t out = weight.dim(0);
  detail::require(weight.shape().size() == 2 && weight.dim(1) == in, "linear: shape mismatch");
  Tensor<T> y({out});
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(y.data(), out).noalias() =
      ConstMatMap<T>(weight.value().data(), out, in) *
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x.value().data(), in);
  if (bias.defined())
    for (std::size_t i = 0; i < out; ++i) y[i] += bias.value()[i];
  const bool has_bias = bias.defined();
  return make_result<T>(std::move(y), {x, weight, has_bias ? bias : Var<T>()},
                        [in, out, has_bias](Node<T>& self) {
    using Vec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
    Vec dy(self.grad.data(), out);
    if (self.wants_grad(1)) {
      MatMap<T> dw(self.input_grad(1).data(), out, in);
      dw.noalias() += dy * Vec(self.input_value(0).data(), in).transpose();
    }
    if (has_bias && self.wants_grad(2)) {
      Tensor<T>& db = self.input_grad(2);
      for (std::size_t i = 0; i < out; ++i) db[i] += self.grad[i];
    }
    if (self.wants_grad(0)) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dx(self.input_grad(0).data(), in);
      dx.noalias() += ConstMatMap<T>(self.input_value(1).data(), out, in).transpose() * dy;
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  return make_result<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    if (self.wants_grad(0)) self.input_grad(0) += self.grad;
    if (self.wants_grad(1)) self.input_grad(1) += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  return make_result<T>(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    if (self.wants_grad(0)) self.input_grad(0) += self.grad;
    if (self.wants_grad(1)) self.input_grad(1) -= self.grad;
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(a.value() * s, {a}, [s](Node<T>& self) {
    Tensor<T>& g = self.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// a + c for a constant tensor c.
template <typename T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& c) {
  return make_result<T>(a.value() + c, {a}, [](Node<T>& self) { self.input_grad(0) += self.grad; });
}

// x[c, :, :] + v[c]
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  const std::size_t C = x.dim(0);
  const std::size_t plane = x.value().size() / C;
  detail::require(v.value().size() == C, "add_channel_bias: size mismatch");
  Tensor<T> y = x.value();
  for (std::size_t c = 0; c < C; ++c) {
    T* p = y.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += v.value()[c];
  }
  return make_result<T>(std::move(y), {x, v}, [C, plane](Node<T>& self) {
    if (self.wants_grad(0)) self.input_grad(0) += self.grad;
    if (self.wants_grad(1)) {
      Tensor<T>& dv = self.input_grad(1);
      for (std::size_t c = 0; c < C; ++c) {
        const T* g = self.grad.data() + c * plane;
        T s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += g[i];
        dv[c] += s;
      }
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = y.size();
  {
    detail::ConstArrayMap<T> xv(x.value().data(), n);
    detail::ArrayMap<T>(y.data(), n) = xv / (T(1) + (-xv).exp());
  }
  return make_result<T>(std::move(y), {x}, [n](Node<T>& self) {
    detail::ConstArrayMap<T> xv(self.input_value(0).data(), n);
    detail::ConstArrayMap<T> g(self.grad.data(), n);
    detail::ArrayMap<T> dx(self.input_grad(0).data(), n);
    auto s = (T(1) + (-xv).exp()).inverse();
    dx += g * s * (T(1) + xv * (T(1) - s));
  });
}

// GELU with the tanh approximation.
template <typename T>
Var<T> gelu_tanh(const Var<T>& x) {
  static constexpr T kA = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kB = T(0.044715);
  Tensor<T> y(x.shape());
  const std::size_t n = y.size();
  {
    detail::ConstArrayMap<T> v(x.value().data(), n);
    detail::ArrayMap<T>(y.data(), n) = T(0.5) * v * (T(1) + (kA * (v + kB * v.cube())).tanh());
  }
  return make_result<T>(std::move(y), {x}, [n](Node<T>& self) {
    detail::ConstArrayMap<T> v(self.input_value(0).data(), n);
    detail::ConstArrayMap<T> g(self.grad.data(), n);
    detail::ArrayMap<T> dx(self.input_grad(0).data(), n);
    Eigen::Array<T, Eigen::Dynamic, 1> th = (kA * (v + kB * v.cube())).tanh();
    dx += g * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * kA * (T(1) + T(3) * kB * v.square()));
  });
}

// Group normalization over [C, H, W] with per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  double eps = 1e-5) {
  const std::size_t C = x.dim(0);
  detail::require(C % groups == 0, "group_norm: channels not divisible by groups");
  const std::size_t plane = x.value().size() / C;
  const std::size_t cpg = C / groups;
  const std::size_t count = cpg * plane;
  std::vector<double> mean(groups), rstd(groups);
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    const T* p = xv.data() + g * count;
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < count; ++i) s += p[i];
    const double m = s / count;
    for (std::size_t i = 0; i < count; ++i) ss += (p[i] - m) * (p[i] - m);
    mean[g] = m;
    rstd[g] = 1.0 / std::sqrt(ss / count + eps);
    for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
      const T a = static_cast<T>(rstd[g]) * gamma.value()[c];
      const T b = beta.value()[c] - static_cast<T>(m * rstd[g]) * gamma.value()[c];
      const T* src = xv.data() + c * plane;
      T* dst = y.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * a + b;
    }
  }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [groups, cpg, plane, count, mean = std::move(mean),
                         rstd = std::move(rstd)](Node<T>& self) {
    const Tensor<T>& xv = self.input_value(0);
    const Tensor<T>& gv = self.input_value(1);
    for (std::size_t g = 0; g < groups; ++g) {
      const T m = static_cast<T>(mean[g]);
      const T r = static_cast<T>(rstd[g]);
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* xp = xv.data() + c * plane;
        const T* dy = self.grad.data() + c * plane;
        double dgamma = 0.0, dbeta = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const T xhat = (xp[i] - m) * r;
          dgamma += dy[i] * xhat;
          dbeta += dy[i];
        }
        sum_dxhat += gv[c] * dbeta;
        sum_dxhat_xhat += gv[c] * dgamma;
        if (self.wants_grad(1)) self.input_grad(1)[c] += static_cast<T>(dgamma);
        if (self.wants_grad(2)) self.input_grad(2)[c] += static_cast<T>(dbeta);
      }
      if (!self.wants_grad(0)) continue;
      const T mean_dxhat = static_cast<T>(sum_dxhat / count);
      const T mean_dxhat_xhat = static_cast<T>(sum_dxhat_xhat / count);
      Tensor<T>& dx = self.input_grad(0);
      for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* xp = xv.data() + c * plane;
        const T* dy = self.grad.data() + c * plane;
        T* dxp = dx.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T xhat = (xp[i] - m) * r;
          dxp[i] += r * (dy[i] * gv[c] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    }
  });
}

// RMS normalization across channels at every (f, t) position.
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gamma, double eps = 1e-6) {
  const std::size_t C = x.dim(0);
  const std::size_t plane = x.value().size() / C;
  const Tensor<T>& xv = x.value();
  std::vector<T> rinv(plane, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = xv.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) rinv[i] += p[i] * p[i];
  }
  for (auto& r : rinv) r = static_cast<T>(1.0 / std::sqrt(static_cast<double>(r) / C + eps));
  Tensor<T> y(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = xv.data() + c * plane;
    T* q = y.data() + c * plane;
    const T g = gamma.value()[c];
    for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * rinv[i] * g;
  }
  return make_result<T>(std::move(y), {x, gamma}, [C, plane, rinv = std::move(rinv)](Node<T>& self) {
    const Tensor<T>& xv = self.input_value(0);
    const Tensor<T>& gv = self.input_value(1);
    std::vector<T> dot(plane, T(0));
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv.data() + c * plane;
      const T* dy = self.grad.data() + c * plane;
      T dg = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        dot[i] += gv[c] * dy[i] * p[i];
        dg += dy[i] * p[i] * rinv[i];
      }
      if (self.wants_grad(1)) self.input_grad(1)[c] += dg;
    }
    if (!self.wants_grad(0)) return;
    Tensor<T>& dx = self.input_grad(0);
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv.data() + c * plane;
      const T* dy = self.grad.data() + c * plane;
      T* dxp = dx.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T r = rinv[i];
        dxp[i] += r * gv[c] * dy[i] - p[i] * r * r * r * dot[i] / static_cast<T>(C);
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 3 && bs.size() == 3 && as[1] == bs[1] && as[2] == bs[2],
                  "concat_channels: shape mismatch");
  Tensor<T> y({as[0] + bs[0], as[1], as[2]});
  std::copy(a.value().data(), a.value().data() + a.value().size(), y.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), y.data() + a.value().size());
  const std::size_t na = a.value().size();
  return make_result<T>(std::move(y), {a, b}, [na](Node<T>& self) {
    if (self.wants_grad(0)) {
      Tensor<T>& g = self.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.wants_grad(1)) {
      Tensor<T>& g = self.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

// Average of adjacent frequency rows: [C, H, W] -> [C, H/2, W].
template <typename T>
Var<T> avg_pool_freq(const Var<T>& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  detail::require(H % 2 == 0, "avg_pool_freq: odd frequency size");
  Tensor<T> y({C, H / 2, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H / 2; ++h)
      for (std::size_t w = 0; w < W; ++w)
        y.at(c, h, w) = T(0.5) * (x.value().at(c, 2 * h, w) + x.value().at(c, 2 * h + 1, w));
  return make_result<T>(std::move(y), {x}, [C, H, W](Node<T>& self) {
    Tensor<T>& dx = self.input_grad(0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H / 2; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const T g = T(0.5) * self.grad.at(c, h, w);
          dx.at(c, 2 * h, w) += g;
          dx.at(c, 2 * h + 1, w) += g;
        }
  });
}

// Nearest-neighbour frequency upsampling: [C, H, W] -> [C, 2H, W].
template <typename T>
Var<T> upsample_freq(const Var<T>& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> y({C, 2 * H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < 2 * H; ++h)
      std::copy_n(&x.value().at(c, h / 2, 0), W, &y.at(c, h, 0));
  return make_result<T>(std::move(y), {x}, [C, H, W](Node<T>& self) {
    Tensor<T>& dx = self.input_grad(0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < W; ++w) dx.at(c, h / 2, w) += self.grad.at(c, h, w);
  });
}

// weight * mean((pred - target)^2) as a scalar.
template <typename T>
Var<T> weighted_mse(const Var<T>& pred, const Tensor<T>& target, T weight) {
  pred.value().check_same(target);
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    s += d * d;
  }
  const std::size_t n = target.size();
  Tensor<T> out({1}, static_cast<T>(weight * s / n));
  return make_result<T>(std::move(out), {pred}, [target, weight, n](Node<T>& self) {
    const T k = self.grad[0] * T(2) * weight / static_cast<T>(n);
    Tensor<T>& dp = self.input_grad(0);
    const Tensor<T>& pv = self.input_value(0);
    for (std::size_t i = 0; i < n; ++i) dp[i] += k * (pv[i] - target[i]);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x.value().values()) s += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(s)), {x}, [](Node<T>& self) {
    Tensor<T>& dx = self.input_grad(0);
    for (auto& v : dx.values()) v += self.grad[0];
  });
}

}  // namespace diffsep::nn
