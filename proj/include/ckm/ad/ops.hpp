#pragma once

#include "ckm/ad/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

// Differentiable operations. Every op here has a forward and a backward rule
// and is covered by the finite-difference harness in gradcheck.hpp.
namespace ckm::ad {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& a, Index rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_to_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return make_result<Scalar>("add", a.shape(), a.value() + b.value(), {a, b},
                             [pa, pb](Node<Scalar>& self) {
                               pa->accumulate(self.grad);
                               pb->accumulate(self.grad);
                             });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return make_result<Scalar>("sub", a.shape(), a.value() - b.value(), {a, b},
                             [pa, pb](Node<Scalar>& self) {
                               pa->accumulate(self.grad);
                               pb->accumulate(-self.grad);
                             });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return make_result<Scalar>("mul", a.shape(), a.value() * b.value(), {a, b},
                             [pa, pb](Node<Scalar>& self) {
                               pa->accumulate(self.grad * pb->value);
                               pb->accumulate(self.grad * pa->value);
                             });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  auto pa = a.node();
  return make_result<Scalar>("scale", a.shape(), a.value() * factor, {a},
                             [pa, factor](Node<Scalar>& self) { pa->accumulate(self.grad * factor); });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar offset) {
  auto pa = a.node();
  return make_result<Scalar>("add_scalar", a.shape(), a.value() + offset, {a},
                             [pa](Node<Scalar>& self) { pa->accumulate(self.grad); });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  auto pa = a.node();
  return make_result<Scalar>("square", a.shape(), a.value().square(), {a},
                             [pa](Node<Scalar>& self) {
                               pa->accumulate(Scalar(2) * self.grad * pa->value);
                             });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& a) {
  // NaN is passed through so callers can detect non-finite losses.
  detail::require(!(a.value() < Scalar(0)).any(), "sqrt: negative input");
  auto pa = a.node();
  return make_result<Scalar>("sqrt", a.shape(), a.value().sqrt(), {a}, [pa](Node<Scalar>& self) {
    pa->accumulate(self.grad / (Scalar(2) * self.value));
  });
}

/// Subgradient sign(x), with 0 at x == 0.
template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& a) {
  auto pa = a.node();
  detail::record_branches(a.value() >= Scalar(0));
  return make_result<Scalar>("abs", a.shape(), a.value().abs(), {a}, [pa](Node<Scalar>& self) {
    pa->accumulate(self.grad * pa->value.sign());
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  auto pa = a.node();
  detail::record_branches(a.value() > Scalar(0));
  return make_result<Scalar>("relu", a.shape(), a.value().max(Scalar(0)), {a},
                             [pa](Node<Scalar>& self) {
                               pa->accumulate((pa->value > Scalar(0)).select(self.grad, Scalar(0)));
                             });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  auto pa = a.node();
  Buffer<Scalar> y = (Scalar(1) + (-a.value()).exp()).inverse();
  return make_result<Scalar>("sigmoid", a.shape(), std::move(y), {a}, [pa](Node<Scalar>& self) {
    pa->accumulate(self.grad * self.value * (Scalar(1) - self.value));
  });
}

/// Exact GELU, x * Phi(x).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  auto pa = a.node();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Buffer<Scalar> y = a.value().unaryExpr([inv_sqrt2](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
  return make_result<Scalar>("gelu", a.shape(), std::move(y), {a},
                             [pa, inv_sqrt2](Node<Scalar>& self) {
                               const Scalar inv_sqrt_2pi =
                                   Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
                               Buffer<Scalar> d = pa->value.unaryExpr([&](Scalar x) {
                                 const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
                                 const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * x * x);
                                 return cdf + x * pdf;
                               });
                               pa->accumulate(self.grad * d);
                             });
}

// ----------------------------------------------------------------- reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  auto pa = a.node();
  Buffer<Scalar> v(1);
  v[0] = a.value().sum();
  return make_result<Scalar>("sum", {}, std::move(v), {a}, [pa](Node<Scalar>& self) {
    pa->accumulate(Buffer<Scalar>::Constant(pa->value.size(), self.grad[0]));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  detail::require(a.numel() > 0, "mean: empty tensor");
  auto pa = a.node();
  Buffer<Scalar> v(1);
  v[0] = a.value().mean();
  return make_result<Scalar>("mean", {}, std::move(v), {a}, [pa](Node<Scalar>& self) {
    const Scalar g = self.grad[0] / Scalar(pa->value.size());
    pa->accumulate(Buffer<Scalar>::Constant(pa->value.size(), g));
  });
}

// ---------------------------------------------------------------------- shape

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                      shape_to_string(shape));
  auto pa = a.node();
  return make_result<Scalar>("reshape", std::move(shape), a.value(), {a},
                             [pa](Node<Scalar>& self) { pa->accumulate(self.grad); });
}

/// General axis permutation: output axis i is input axis axes[i].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& a, const std::vector<int>& axes) {
  const Index rank = a.rank();
  detail::require(static_cast<Index>(axes.size()) == rank, "permute: axes length must equal rank");
  std::vector<bool> used(rank, false);
  for (int ax : axes) {
    detail::require(ax >= 0 && ax < rank && !used[ax], "permute: invalid axis list");
    used[ax] = true;
  }
  const Shape& in_shape = a.shape();
  std::vector<Index> in_strides(rank, 1);
  for (Index i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(rank);
  std::vector<Index> gather_strides(rank);
  for (Index i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    gather_strides[i] = in_strides[axes[i]];
  }
  // src[i] = input offset feeding output element i.
  const Index n = a.numel();
  std::vector<Index> src(n);
  std::vector<Index> counter(rank, 0);
  Index offset = 0;
  for (Index i = 0; i < n; ++i) {
    src[i] = offset;
    for (Index d = rank - 1; d >= 0; --d) {
      ++counter[d];
      offset += gather_strides[d];
      if (counter[d] < out_shape[d]) break;
      offset -= gather_strides[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  Buffer<Scalar> out(n);
  for (Index i = 0; i < n; ++i) out[i] = a.value()[src[i]];
  auto pa = a.node();
  return make_result<Scalar>("permute", std::move(out_shape), std::move(out), {a},
                             [pa, src = std::move(src)](Node<Scalar>& self) {
                               Buffer<Scalar> g = Buffer<Scalar>::Zero(pa->value.size());
                               for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                               pa->accumulate(g);
                             });
}

/// Concatenates along `axis`; all other dims must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::require(axis >= 0 && axis < static_cast<int>(ref.size()), "concat: axis out of range");
  Index total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == static_cast<Index>(ref.size()), "concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (static_cast<int>(d) != axis) {
        detail::require(p.shape()[d] == ref[d], "concat: shape mismatch " +
                                                    shape_to_string(p.shape()) + " vs " +
                                                    shape_to_string(ref));
      }
    }
    total += p.shape()[axis];
  }
  Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape out_shape = ref;
  out_shape[axis] = total;
  Buffer<Scalar> out(shape_numel(out_shape));
  std::vector<Index> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const Index out_row = total * inner;
  Index col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (Index o = 0; o < outer; ++o) {
      out.segment(o * out_row + col, widths[k]) = parts[k].value().segment(o * widths[k], widths[k]);
    }
    col += widths[k];
  }
  std::vector<typename Tensor<Scalar>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result<Scalar>(
      "concat", std::move(out_shape), std::move(out), parts,
      [nodes, widths, outer, out_row](Node<Scalar>& self) {
        Index col = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (nodes[k]->requires_grad) {
            Buffer<Scalar> g(outer * widths[k]);
            for (Index o = 0; o < outer; ++o) {
              g.segment(o * widths[k], widths[k]) = self.grad.segment(o * out_row + col, widths[k]);
            }
            nodes[k]->accumulate(g);
          }
          col += widths[k];
        }
      });
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return concat<Scalar>({a, b}, 1);
}

/// B x C x H x W feature map to a B x (H*W) x C token sequence.
template <typename Scalar>
Tensor<Scalar> to_tokens(const Tensor<Scalar>& x) {
  detail::require_rank(x, 4, "to_tokens");
  const Index b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return permute(reshape(x, {b, c, hw}), {0, 2, 1});
}

/// Inverse of to_tokens.
template <typename Scalar>
Tensor<Scalar> from_tokens(const Tensor<Scalar>& tokens, Index height, Index width) {
  detail::require_rank(tokens, 3, "from_tokens");
  detail::require(tokens.dim(1) == height * width, "from_tokens: sequence length " +
                                                       std::to_string(tokens.dim(1)) +
                                                       " does not match " + std::to_string(height) +
                                                       "x" + std::to_string(width));
  const Index b = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {b, c, height, width});
}

/// Replicate (edge) padding of the last two dims of an N x C x H x W tensor.
template <typename Scalar>
Tensor<Scalar> pad_replicate(const Tensor<Scalar>& x, Index pad) {
  detail::require_rank(x, 4, "pad_replicate");
  detail::require(pad >= 0, "pad_replicate: negative padding");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = h + 2 * pad, wo = w + 2 * pad;
  std::vector<Index> src(planes * ho * wo);
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < ho; ++i) {
      const Index si = std::clamp<Index>(i - pad, 0, h - 1);
      for (Index j = 0; j < wo; ++j) {
        const Index sj = std::clamp<Index>(j - pad, 0, w - 1);
        src[(p * ho + i) * wo + j] = (p * h + si) * w + sj;
      }
    }
  }
  Buffer<Scalar> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.value()[src[i]];
  auto px = x.node();
  return make_result<Scalar>("pad_replicate", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                             [px, src = std::move(src)](Node<Scalar>& self) {
                               Buffer<Scalar> g = Buffer<Scalar>::Zero(px->value.size());
                               for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                               px->accumulate(g);
                             });
}

// ------------------------------------------------------------- linear algebra

/// x[..., K] times w[K, N] -> [..., N].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
  detail::require(x.rank() >= 1 && w.rank() == 2, "matmul: expected x[..., K] and w[K, N]");
  const Index k = x.shape().back();
  detail::require(w.dim(0) == k, "matmul: inner dimension mismatch " + shape_to_string(x.shape()) +
                                     " x " + shape_to_string(w.shape()));
  const Index n = w.dim(1);
  const Index rows = x.numel() / std::max<Index>(k, 1);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Buffer<Scalar> out(rows * n);
  MatMap<Scalar>(out.data(), rows, n).noalias() =
      ConstMatMap<Scalar>(x.value().data(), rows, k) * ConstMatMap<Scalar>(w.value().data(), k, n);
  auto px = x.node(), pw = w.node();
  return make_result<Scalar>("matmul", std::move(out_shape), std::move(out), {x, w},
                             [px, pw, rows, k, n](Node<Scalar>& self) {
                               ConstMatMap<Scalar> g(self.grad.data(), rows, n);
                               if (px->requires_grad) {
                                 Buffer<Scalar> gx(rows * k);
                                 MatMap<Scalar>(gx.data(), rows, k).noalias() =
                                     g * ConstMatMap<Scalar>(pw->value.data(), k, n).transpose();
                                 px->accumulate(gx);
                               }
                               if (pw->requires_grad) {
                                 Buffer<Scalar> gw(k * n);
                                 MatMap<Scalar>(gw.data(), k, n).noalias() =
                                     ConstMatMap<Scalar>(px->value.data(), rows, k).transpose() * g;
                                 pw->accumulate(gw);
                               }
                             });
}

/// x[..., K] * w[K, N] + b[N].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  Tensor<Scalar> y = matmul(x, w);
  detail::require(b.rank() == 1 && b.dim(0) == w.dim(1), "linear: bias shape mismatch");
  const Index n = w.dim(1);
  const Index rows = y.numel() / n;
  Buffer<Scalar> out = y.value();
  MatMap<Scalar>(out.data(), rows, n).rowwise() +=
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(b.value().data(), n);
  auto py = y.node(), pb = b.node();
  return make_result<Scalar>("linear_bias", y.shape(), std::move(out), {y, b},
                             [py, pb, rows, n](Node<Scalar>& self) {
                               py->accumulate(self.grad);
                               if (pb->requires_grad) {
                                 Buffer<Scalar> gb =
                                     ConstMatMap<Scalar>(self.grad.data(), rows, n).colwise().sum().transpose();
                                 pb->accumulate(gb);
                               }
                             });
}

/// Batched product a[G, M, K] * b[G, K, N]; with transpose_b, b is [G, N, K].
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const Index g = a.dim(0), m = a.dim(1), k = a.dim(2);
  detail::require(b.dim(0) == g, "bmm: batch mismatch");
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  detail::require((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm: inner dimension mismatch");
  const Index br = transpose_b ? n : k, bc = transpose_b ? k : n;
  Buffer<Scalar> out(g * m * n);
  for (Index i = 0; i < g; ++i) {
    ConstMatMap<Scalar> am(a.value().data() + i * m * k, m, k);
    ConstMatMap<Scalar> bm(b.value().data() + i * br * bc, br, bc);
    MatMap<Scalar> om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * bm.transpose();
    } else {
      om.noalias() = am * bm;
    }
  }
  auto pa = a.node(), pb = b.node();
  return make_result<Scalar>(
      "bmm", {g, m, n}, std::move(out), {a, b},
      [pa, pb, g, m, k, n, br, bc, transpose_b](Node<Scalar>& self) {
        Buffer<Scalar> ga, gb;
        if (pa->requires_grad) ga = Buffer<Scalar>::Zero(g * m * k);
        if (pb->requires_grad) gb = Buffer<Scalar>::Zero(g * br * bc);
        for (Index i = 0; i < g; ++i) {
          ConstMatMap<Scalar> go(self.grad.data() + i * m * n, m, n);
          ConstMatMap<Scalar> am(pa->value.data() + i * m * k, m, k);
          ConstMatMap<Scalar> bm(pb->value.data() + i * br * bc, br, bc);
          if (pa->requires_grad) {
            MatMap<Scalar> gam(ga.data() + i * m * k, m, k);
            if (transpose_b) {
              gam.noalias() = go * bm;
            } else {
              gam.noalias() = go * bm.transpose();
            }
          }
          if (pb->requires_grad) {
            MatMap<Scalar> gbm(gb.data() + i * br * bc, br, bc);
            if (transpose_b) {
              gbm.noalias() = go.transpose() * am;
            } else {
              gbm.noalias() = am.transpose() * go;
            }
          }
        }
        if (pa->requires_grad) pa->accumulate(ga);
        if (pb->requires_grad) pb->accumulate(gb);
      });
}

/// Normalizes over the last dimension, then applies gamma * x_hat + beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  detail::require(x.rank() >= 1, "layer_norm: scalar input");
  const Index d = x.shape().back();
  detail::require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
                  "layer_norm: affine parameters must have length " + std::to_string(d));
  const Index rows = x.numel() / d;
  Buffer<Scalar> x_hat(x.numel());
  Buffer<Scalar> inv_std(rows);
  Buffer<Scalar> out(x.numel());
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.value().segment(r * d, d);
    const Scalar mu = row.mean();
    const Scalar var = (row - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    x_hat.segment(r * d, d) = (row - mu) * inv_std[r];
    out.segment(r * d, d) = x_hat.segment(r * d, d) * gamma.value() + beta.value();
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result<Scalar>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, x_hat = std::move(x_hat), inv_std = std::move(inv_std), rows, d](Node<Scalar>& self) {
        Buffer<Scalar> gx(rows * d);
        Buffer<Scalar> gg = Buffer<Scalar>::Zero(d);
        Buffer<Scalar> gbeta = Buffer<Scalar>::Zero(d);
        for (Index r = 0; r < rows; ++r) {
          const auto gy = self.grad.segment(r * d, d);
          const auto xh = x_hat.segment(r * d, d);
          gg += gy * xh;
          gbeta += gy;
          const Buffer<Scalar> gxh = gy * pg->value;
          gx.segment(r * d, d) = inv_std[r] * (gxh - gxh.mean() - xh * (gxh * xh).mean());
        }
        px->accumulate(gx);
        pg->accumulate(gg);
        pb->accumulate(gbeta);
      });
}

/// Softmax over the last dimension (max-subtracted).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  detail::require(x.rank() >= 1, "softmax: scalar input");
  const Index d = x.shape().back();
  const Index rows = x.numel() / d;
  Buffer<Scalar> out(x.numel());
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.value().segment(r * d, d);
    auto e = (row - row.maxCoeff()).exp();
    out.segment(r * d, d) = e / e.sum();
  }
  auto px = x.node();
  return make_result<Scalar>("softmax", x.shape(), std::move(out), {x},
                             [px, rows, d](Node<Scalar>& self) {
                               Buffer<Scalar> gx(rows * d);
                               for (Index r = 0; r < rows; ++r) {
                                 const auto y = self.value.segment(r * d, d);
                                 const auto gy = self.grad.segment(r * d, d);
                                 gx.segment(r * d, d) = y * (gy - (gy * y).sum());
                               }
                               px->accumulate(gx);
                             });
}

// ---------------------------------------------------------------- convolution

namespace detail {

struct ConvGeometry {
  Index batch, in_ch, height, width, out_ch, kernel, stride, pad, out_h, out_w;
  Index patch() const { return in_ch * kernel * kernel; }
  Index pixels() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  for (Index c = 0; c < g.in_ch; ++c) {
    for (Index ki = 0; ki < g.kernel; ++ki) {
      for (Index kj = 0; kj < g.kernel; ++kj) {
        Scalar* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.pixels();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = image + (c * g.height + iy) * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.in_ch; ++c) {
    for (Index ki = 0; ki < g.kernel; ++ki) {
      for (Index kj = 0; kj < g.kernel; ++kj) {
        const Scalar* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.pixels();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const Scalar* src = row + oy * g.out_w;
          Scalar* dst = image + (c * g.height + iy) * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x[N, C, H, W] with w[O, C, k, k] plus optional bias[O].
/// Output size per axis is floor((H + 2*padding - k) / stride) + 1.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias,
                      Index stride = 1, Index padding = 0) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d weight");
  detail::require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  detail::require(w.dim(1) == x.dim(1), "conv2d: channel mismatch " + shape_to_string(x.shape()) +
                                            " vs weight " + shape_to_string(w.shape()));
  detail::require(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2),
                         stride,   padding,  0,        0};
  const Index span_h = g.height + 2 * padding - g.kernel;
  const Index span_w = g.width + 2 * padding - g.kernel;
  detail::require(span_h >= 0 && span_w >= 0, "conv2d: kernel larger than padded input");
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.rank() == 1 && bias.dim(0) == g.out_ch, "conv2d: bias shape mismatch");
  }

  const Index in_plane = g.in_ch * g.height * g.width;
  const Index out_plane = g.out_ch * g.pixels();
  Buffer<Scalar> out(g.batch * out_plane);
  ConstMatMap<Scalar> wm(w.value().data(), g.out_ch, g.patch());
  RowMatrix<Scalar> col;
  if (!g.pointwise()) col.resize(g.patch(), g.pixels());
  for (Index n = 0; n < g.batch; ++n) {
    MatMap<Scalar> om(out.data() + n * out_plane, g.out_ch, g.pixels());
    if (g.pointwise()) {
      om.noalias() = wm * ConstMatMap<Scalar>(x.value().data() + n * in_plane, g.in_ch, g.pixels());
    } else {
      detail::im2col(x.value().data() + n * in_plane, g, col.data());
      om.noalias() = wm * col;
    }
    if (has_bias) {
      om.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
          bias.value().data(), g.out_ch);
    }
  }

  auto px = x.node(), pw = w.node();
  auto pb = has_bias ? bias.node() : nullptr;
  std::vector<Tensor<Scalar>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<Scalar>(
      "conv2d", {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [px, pw, pb, g, in_plane, out_plane](Node<Scalar>& self) {
        ConstMatMap<Scalar> wm(pw->value.data(), g.out_ch, g.patch());
        Buffer<Scalar> gx, gw, gb;
        if (px->requires_grad) gx = Buffer<Scalar>::Zero(g.batch * in_plane);
        if (pw->requires_grad) gw = Buffer<Scalar>::Zero(g.out_ch * g.patch());
        if (pb && pb->requires_grad) gb = Buffer<Scalar>::Zero(g.out_ch);
        RowMatrix<Scalar> col, gcol;
        if (!g.pointwise()) {
          col.resize(g.patch(), g.pixels());
          gcol.resize(g.patch(), g.pixels());
        }
        for (Index n = 0; n < g.batch; ++n) {
          ConstMatMap<Scalar> go(self.grad.data() + n * out_plane, g.out_ch, g.pixels());
          if (gb.size()) gb += go.rowwise().sum().array();
          if (g.pointwise()) {
            ConstMatMap<Scalar> xm(px->value.data() + n * in_plane, g.in_ch, g.pixels());
            if (gw.size()) MatMap<Scalar>(gw.data(), g.out_ch, g.patch()).noalias() += go * xm.transpose();
            if (gx.size()) {
              MatMap<Scalar>(gx.data() + n * in_plane, g.in_ch, g.pixels()).noalias() =
                  wm.transpose() * go;
            }
          } else {
            if (gw.size()) {
              detail::im2col(px->value.data() + n * in_plane, g, col.data());
              MatMap<Scalar>(gw.data(), g.out_ch, g.patch()).noalias() += go * col.transpose();
            }
            if (gx.size()) {
              gcol.noalias() = wm.transpose() * go;
              detail::col2im(gcol.data(), g, gx.data() + n * in_plane);
            }
          }
        }
        if (gx.size()) px->accumulate(gx);
        if (gw.size()) pw->accumulate(gw);
        if (gb.size()) pb->accumulate(gb);
      });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride = 1,
                      Index padding = 0) {
  return conv2d(x, w, Tensor<Scalar>(), stride, padding);
}

/// Mean of each 2x2 block of an N x C x H x W tensor; H and W must be even.
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  detail::require_rank(x, 4, "avg_pool2");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(h % 2 == 0 && w % 2 == 0,
                  "avg_pool2: spatial dims must be even, got " + shape_to_string(x.shape()));
  const Index ho = h / 2, wo = w / 2;
  Buffer<Scalar> out(planes * ho * wo);
  const Scalar* src = x.value().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < ho; ++i) {
      const Scalar* r0 = src + (p * h + 2 * i) * w;
      const Scalar* r1 = r0 + w;
      for (Index j = 0; j < wo; ++j) {
        out[(p * ho + i) * wo + j] =
            Scalar(0.25) * ((r0[2 * j] + r0[2 * j + 1]) + (r1[2 * j] + r1[2 * j + 1]));
      }
    }
  }
  auto px = x.node();
  return make_result<Scalar>("avg_pool2", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                             [px, planes, h, w, ho, wo](Node<Scalar>& self) {
                               Buffer<Scalar> g(planes * h * w);
                               for (Index p = 0; p < planes; ++p) {
                                 for (Index i = 0; i < h; ++i) {
                                   for (Index j = 0; j < w; ++j) {
                                     g[(p * h + i) * w + j] =
                                         Scalar(0.25) * self.grad[(p * ho + i / 2) * wo + j / 2];
                                   }
                                 }
                               }
                               px->accumulate(g);
                             });
}

namespace detail {

// Source taps for a 2x bilinear resize with half-pixel centres
// (align_corners = false), clamped at the borders.
struct UpsampleTaps {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

inline UpsampleTaps upsample_taps(Index in) {
  UpsampleTaps t;
  for (Index o = 0; o < 2 * in; ++o) {
    const double src = std::max(0.0, (o + 0.5) / 2.0 - 0.5);
    const Index lo = std::min<Index>(static_cast<Index>(src), in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(std::min<Index>(lo + 1, in - 1));
    t.frac.push_back(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace detail

/// 2x bilinear upsampling of an N x C x H x W tensor with half-pixel centres.
template <typename Scalar>
Tensor<Scalar> bilinear_upsample2(const Tensor<Scalar>& x) {
  detail::require_rank(x, 4, "bilinear_upsample2");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(h >= 1 && w >= 1, "bilinear_upsample2: empty spatial dims");
  const Index ho = 2 * h, wo = 2 * w;
  auto ty = detail::upsample_taps(h);
  auto tx = detail::upsample_taps(w);
  Buffer<Scalar> out(planes * ho * wo);
  const Scalar* src = x.value().data();
  for (Index p = 0; p < planes; ++p) {
    const Scalar* plane = src + p * h * w;
    for (Index i = 0; i < ho; ++i) {
      const Scalar fy = Scalar(ty.frac[i]);
      const Scalar* r0 = plane + ty.lo[i] * w;
      const Scalar* r1 = plane + ty.hi[i] * w;
      for (Index j = 0; j < wo; ++j) {
        const Scalar fx = Scalar(tx.frac[j]);
        const Scalar top = (Scalar(1) - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
        const Scalar bottom = (Scalar(1) - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
        out[(p * ho + i) * wo + j] = (Scalar(1) - fy) * top + fy * bottom;
      }
    }
  }
  auto px = x.node();
  return make_result<Scalar>(
      "bilinear_upsample2", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
      [px, planes, h, w, ho, wo, ty = std::move(ty), tx = std::move(tx)](Node<Scalar>& self) {
        Buffer<Scalar> g = Buffer<Scalar>::Zero(planes * h * w);
        for (Index p = 0; p < planes; ++p) {
          Scalar* plane = g.data() + p * h * w;
          for (Index i = 0; i < ho; ++i) {
            const Scalar fy = Scalar(ty.frac[i]);
            Scalar* r0 = plane + ty.lo[i] * w;
            Scalar* r1 = plane + ty.hi[i] * w;
            for (Index j = 0; j < wo; ++j) {
              const Scalar fx = Scalar(tx.frac[j]);
              const Scalar go = self.grad[(p * ho + i) * wo + j];
              r0[tx.lo[j]] += (Scalar(1) - fy) * (Scalar(1) - fx) * go;
              r0[tx.hi[j]] += (Scalar(1) - fy) * fx * go;
              r1[tx.lo[j]] += fy * (Scalar(1) - fx) * go;
              r1[tx.hi[j]] += fy * fx * go;
            }
          }
        }
        px->accumulate(g);
      });
}

}  // namespace ckm::ad
