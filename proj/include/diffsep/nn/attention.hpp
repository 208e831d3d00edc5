// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <vector>

#include "diffsep/nn/ops.hpp"

namespace diffsep::nn {

enum class Axis { kTime, kFrequency };

// Rotary position tables, always evaluated in double precision regardless of
// the activation type.
class RotaryTable {
 public:
  RotaryTable(std::size_t length, std::size_t head_dim, double base = 10000.0)
      : half_(head_dim / 2), cos_(length * half_), sin_(length * half_) {
    for (std::size_t p = 0; p < length; ++p)
      for (std::size_t i = 0; i < half_; ++i) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(i) / head_dim);
        cos_[p * half_ + i] = std::cos(p * theta);
        sin_[p * half_ + i] = std::sin(p * theta);
      }
  }

  // Rotates consecutive pairs of v (length head_dim) at position p. With
  // inverse = true applies the transpose rotation (used by the backward pass).
  template <typename T>
  void apply(T* v, std::size_t p, bool inverse = false) const {
    for (std::size_t i = 0; i < half_; ++i) {
      const double c = cos_[p * half_ + i];
      const double s = inverse ? -sin_[p * half_ + i] : sin_[p * half_ + i];
      const double a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = static_cast<T>(a * c - b * s);
      v[2 * i + 1] = static_cast<T>(a * s + b * c);
    }
  }

 private:
  std::size_t half_;
  std::vector<double> cos_, sin_;
};

namespace detail {

struct AxialLayout {
  std::size_t dim, heads, head_dim, F, T;
  Axis axis;
  std::size_t sequences() const { return axis == Axis::kTime ? F : T; }
  std::size_t length() const { return axis == Axis::kTime ? T : F; }
  // Flat offset of position p of sequence s within one channel plane.
  std::size_t offset(std::size_t s, std::size_t p) const {
    return axis == Axis::kTime ? s * T + p : p * T + s;
  }
};

// Gathers q, k, v for one (sequence, head) into row-major [L, head_dim]
// matrices, rotating q and k. q is multiplied by `q_scale` after rotation.
template <typename T>
void gather_head(const T* qkv, const AxialLayout& lay, const RotaryTable& rope, std::size_t s,
                 std::size_t h, T q_scale, RowMatrix<T>& q, RowMatrix<T>& k, RowMatrix<T>& v) {
  const std::size_t L = lay.length(), plane = lay.F * lay.T;
  q.resize(L, lay.head_dim);
  k.resize(L, lay.head_dim);
  v.resize(L, lay.head_dim);
  for (std::size_t j = 0; j < lay.head_dim; ++j) {
    const std::size_t c = h * lay.head_dim + j;
    const T* qp = qkv + c * plane;
    const T* kp = qkv + (lay.dim + c) * plane;
    const T* vp = qkv + (2 * lay.dim + c) * plane;
    for (std::size_t p = 0; p < L; ++p) {
      const std::size_t o = lay.offset(s, p);
      q(p, j) = qp[o];
      k(p, j) = kp[o];
      v(p, j) = vp[o];
    }
  }
  for (std::size_t p = 0; p < L; ++p) {
    rope.apply(q.row(p).data(), p);
    rope.apply(k.row(p).data(), p);
  }
  q *= q_scale;
}

template <typename T>
void softmax_rows(RowMatrix<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

}  // namespace detail

// Multi-head self-attention along one axis of a [3*dim, F, T] projection
// holding q, k and v stacked along channels. With Axis::kTime every frequency
// row is an independent sequence over frames; with Axis::kFrequency every
// frame is a sequence over frequency rows. Rotary embeddings encode the
// position along the attended axis. Returns [dim, F, T].
//
// The backward pass recomputes the attention weights instead of storing them.
template <typename T>
Var<T> axial_attention(const Var<T>& qkv, std::size_t heads, Axis axis, double rope_base = 10000.0) {
  const auto& sh = qkv.shape();
  detail::require(sh.size() == 3 && sh[0] % 3 == 0, "axial_attention: expects [3*dim, F, T]");
  const std::size_t dim = sh[0] / 3;
  detail::require(heads > 0 && dim % heads == 0 && (dim / heads) % 2 == 0,
                  "axial_attention: head dimension must be even and divide the width");
  const detail::AxialLayout lay{dim, heads, dim / heads, sh[1], sh[2], axis};
  const std::size_t L = lay.length(), plane = lay.F * lay.T;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(lay.head_dim)));
  auto rope = std::make_shared<RotaryTable>(L, lay.head_dim, rope_base);

  Tensor<T> out({dim, lay.F, lay.T});
  RowMatrix<T> q, k, v, s, o;
  for (std::size_t seq = 0; seq < lay.sequences(); ++seq)
    for (std::size_t h = 0; h < heads; ++h) {
      detail::gather_head(qkv.value().data(), lay, *rope, seq, h, scale, q, k, v);
      s.noalias() = q * k.transpose();
      detail::softmax_rows(s);
      o.noalias() = s * v;
      for (std::size_t j = 0; j < lay.head_dim; ++j) {
        T* dst = out.data() + (h * lay.head_dim + j) * plane;
        for (std::size_t p = 0; p < L; ++p) dst[lay.offset(seq, p)] = o(p, j);
      }
    }

  return make_result<T>(std::move(out), {qkv}, [lay, scale, rope](Node<T>& self) {
    const std::size_t L = lay.length(), plane = lay.F * lay.T;
    const T* x = self.input_value(0).data();
    T* dx = self.input_grad(0).data();
    RowMatrix<T> q, k, v, p, dout(L, lay.head_dim), dv, dp, dq, dk;
    for (std::size_t seq = 0; seq < lay.sequences(); ++seq)
      for (std::size_t h = 0; h < lay.heads; ++h) {
        detail::gather_head(x, lay, *rope, seq, h, scale, q, k, v);
        p.noalias() = q * k.transpose();
        detail::softmax_rows(p);
        for (std::size_t j = 0; j < lay.head_dim; ++j) {
          const T* g = self.grad.data() + (h * lay.head_dim + j) * plane;
          for (std::size_t i = 0; i < L; ++i) dout(i, j) = g[lay.offset(seq, i)];
        }
        dv.noalias() = p.transpose() * dout;
        dp.noalias() = dout * v.transpose();
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        for (Eigen::Index r = 0; r < dp.rows(); ++r) {
          const T dot = (dp.row(r).array() * p.row(r).array()).sum();
          dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
        }
        dq.noalias() = dp * k;
        dq *= scale;
        dk.noalias() = dp.transpose() * q;
        for (std::size_t i = 0; i < L; ++i) {
          rope->apply(dq.row(i).data(), i, true);
          rope->apply(dk.row(i).data(), i, true);
        }
        for (std::size_t j = 0; j < lay.head_dim; ++j) {
          const std::size_t c = h * lay.head_dim + j;
          T* gq = dx + c * plane;
          T* gk = dx + (lay.dim + c) * plane;
          T* gv = dx + (2 * lay.dim + c) * plane;
          for (std::size_t i = 0; i < L; ++i) {
            const std::size_t off = lay.offset(seq, i);
            gq[off] += dq(i, j);
            gk[off] += dk(i, j);
            gv[off] += dv(i, j);
          }
        }
      }
  });
}

}  // namespace diffsep::nn
