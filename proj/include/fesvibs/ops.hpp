#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fesvibs/tensor.hpp"

namespace fesvibs {

template <typename S>
using MatrixRM =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <typename S>
using CMatMap = Eigen::Map<const MatrixRM<S>>;

namespace detail {

// Forward outputs must stay finite on finite inputs; checked outside
// release builds (or with FESVIBS_CHECK_NUMERICS defined).
template <typename S>
inline void check_finite(const std::vector<S>& v, const char* op) {
#if !defined(NDEBUG) || defined(FESVIBS_CHECK_NUMERICS)
  for (S x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
#else
  (void)v;
  (void)op;
#endif
}

template <typename S>
TensorT<S> make_result(std::vector<std::size_t> shape, std::vector<S> value,
                       std::vector<TensorT<S>> inputs,
                       std::function<void(NodeT<S>&)> backprop,
                       const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<NodeT<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any_grad = false;
  for (const auto& t : inputs) any_grad = any_grad || t.requires_grad();
  if (grad_mode() && any_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(backprop);
  }
  return TensorT<S>(std::move(node));
}

template <typename S>
void accumulate(NodeT<S>& parent, const S* contrib, std::size_t n) {
  parent.ensure_grad();
  for (std::size_t i = 0; i < n; ++i) parent.grad[i] += contrib[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<S> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<S>(
      a.shape(), std::move(out), {a, b},
      [](NodeT<S>& self) {
        for (int p = 0; p < 2; ++p) {
          auto& parent = *self.parents[p];
          if (parent.requires_grad)
            detail::accumulate(parent, self.grad.data(), self.grad.size());
        }
      },
      "add");
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<S> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<S>(
      a.shape(), std::move(out), {a, b},
      [](NodeT<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.value[i];
        }
      },
      "mul");
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  std::vector<S> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [c](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          p.grad[i] += self.grad[i] * c;
      },
      "scale");
}

// x: [..., D] plus bias [D].
template <typename S>
TensorT<S> add_last_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.rank() < 1 || bias.rank() != 1 ||
      x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_last_bias: " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  std::vector<S> out(x.size());
  auto xv = x.data(), bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % d];
  return detail::make_result<S>(
      x.shape(), std::move(out), {x, bias},
      [d](NodeT<S>& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad)
          detail::accumulate(px, self.grad.data(), self.grad.size());
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i % d] += self.grad[i];
        }
      },
      "add_last_bias");
}

// x: [B, F, H, W] plus per-channel bias [F].
template <typename S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) +
                         " vs " + shape_str(bias.shape()));
  }
  const std::size_t f = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<S> out(x.size());
  auto xv = x.data(), bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] + bv[(i / hw) % f];
  return detail::make_result<S>(
      x.shape(), std::move(out), {x, bias},
      [f, hw](NodeT<S>& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad)
          detail::accumulate(px, self.grad.data(), self.grad.size());
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[(i / hw) % f] += self.grad[i];
        }
      },
      "add_channel_bias");
}

// ---------------------------------------------------------------------------
// Matrix product
//
// Supported forms:
//   [m,k] x [k,n]          -> [m,n]
//   [...,m,k] x [k,n]      -> [...,m,n]   (shared right operand)
//   [...,m,k] x [...,k,n]  -> [...,m,n]   (equal leading dims)
// Backward: da = g.b^T, db = a^T.g (summed over the batch when shared).

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto fail = [&]() -> DimensionError {
    return DimensionError("matmul: " + shape_str(as) + " vs " +
                          shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw fail();
  const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  const bool shared_rhs = bs.size() == 2 && as.size() >= 2;
  if (bs.size() != 2 && bs.size() != as.size()) throw fail();
  const std::size_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != kb) throw fail();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  if (!shared_rhs) {
    for (std::size_t i = 0; i + 2 < as.size(); ++i)
      if (as[i] != bs[i]) throw fail();
  }

  std::vector<std::size_t> out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<S> out(batch * m * n);

  if (!out.empty() && k > 0) {
    if (shared_rhs) {
      CMatMap<S> A(a.data().data(), static_cast<Eigen::Index>(batch * m),
                   static_cast<Eigen::Index>(k));
      CMatMap<S> B(b.data().data(), static_cast<Eigen::Index>(k),
                   static_cast<Eigen::Index>(n));
      MatMap<S> C(out.data(), static_cast<Eigen::Index>(batch * m),
                  static_cast<Eigen::Index>(n));
      C.noalias() = A * B;
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        CMatMap<S> A(a.data().data() + i * m * k,
                     static_cast<Eigen::Index>(m),
                     static_cast<Eigen::Index>(k));
        CMatMap<S> B(b.data().data() + i * k * n,
                     static_cast<Eigen::Index>(k),
                     static_cast<Eigen::Index>(n));
        MatMap<S> C(out.data() + i * m * n, static_cast<Eigen::Index>(m),
                    static_cast<Eigen::Index>(n));
        C.noalias() = A * B;
      }
    }
  }

  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n, batch, shared_rhs](NodeT<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (self.grad.empty()) return;
        if (shared_rhs) {
          CMatMap<S> G(self.grad.data(),
                       static_cast<Eigen::Index>(batch * m),
                       static_cast<Eigen::Index>(n));
          CMatMap<S> B(pb.value.data(), static_cast<Eigen::Index>(k),
                       static_cast<Eigen::Index>(n));
          CMatMap<S> A(pa.value.data(),
                       static_cast<Eigen::Index>(batch * m),
                       static_cast<Eigen::Index>(k));
          if (pa.requires_grad) {
            pa.ensure_grad();
            MatMap<S> DA(pa.grad.data(),
                         static_cast<Eigen::Index>(batch * m),
                         static_cast<Eigen::Index>(k));
            DA.noalias() += G * B.transpose();
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            MatMap<S> DB(pb.grad.data(), static_cast<Eigen::Index>(k),
                         static_cast<Eigen::Index>(n));
            DB.noalias() += A.transpose() * G;
          }
        } else {
          if (pa.requires_grad) pa.ensure_grad();
          if (pb.requires_grad) pb.ensure_grad();
          for (std::size_t i = 0; i < batch; ++i) {
            CMatMap<S> G(self.grad.data() + i * m * n,
                         static_cast<Eigen::Index>(m),
                         static_cast<Eigen::Index>(n));
            CMatMap<S> A(pa.value.data() + i * m * k,
                         static_cast<Eigen::Index>(m),
                         static_cast<Eigen::Index>(k));
            CMatMap<S> B(pb.value.data() + i * k * n,
                         static_cast<Eigen::Index>(k),
                         static_cast<Eigen::Index>(n));
            if (pa.requires_grad) {
              MatMap<S> DA(pa.grad.data() + i * m * k,
                           static_cast<Eigen::Index>(m),
                           static_cast<Eigen::Index>(k));
              DA.noalias() += G * B.transpose();
            }
            if (pb.requires_grad) {
              MatMap<S> DB(pb.grad.data() + i * k * n,
                           static_cast<Eigen::Index>(k),
                           static_cast<Eigen::Index>(n));
              DB.noalias() += A.transpose() * G;
            }
          }
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Softmax along an axis, computed with max subtraction.

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank()) {
    throw ValidationError("softmax: axis " + std::to_string(axis) +
                          " invalid for shape " + shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t n = shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < static_cast<std::size_t>(axis); ++i)
    outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  std::vector<S> out(x.size());
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      S mx = xv[base];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, xv[base + j * inner]);
      S sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        S e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  }

  return detail::make_result<S>(
      shape, std::move(out), {x},
      [n, outer, inner](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            S dot = 0;
            for (std::size_t j = 0; j < n; ++j)
              dot += self.grad[base + j * inner] * self.value[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              p.grad[idx] += self.value[idx] * (self.grad[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis with affine parameters.

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d ||
      beta.dim(0) != d) {
    throw DimensionError("layer_norm: x " + shape_str(x.shape()) +
                         " vs gamma " + shape_str(gamma.shape()) + ", beta " +
                         shape_str(beta.shape()));
  }
  if (!(eps > S(0))) throw ValidationError("layer_norm: eps must be > 0");
  const std::size_t rows = x.size() / std::max<std::size_t>(d, 1);

  std::vector<S> out(x.size());
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  auto xv = x.data();
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * d;
    S mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<S>(d);
    S var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      S c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      S xh = (row[j] - mean) * inv;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }

  return detail::make_result<S>(
      x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat, inv_std](NodeT<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<S> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const S* g = self.grad.data() + r * d;
          const S* xh = xhat->data() + r * d;
          if (px.requires_grad) {
            S m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g[j] * pg.value[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xh[j];
            }
            m1 /= static_cast<S>(d);
            m2 /= static_cast<S>(d);
            const S inv = (*inv_std)[r];
            for (std::size_t j = 0; j < d; ++j)
              px.grad[r * d + j] += inv * (dxhat[j] - m1 - xh[j] * m2);
          }
          for (std::size_t j = 0; j < d; ++j) {
            if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
            if (pb.requires_grad) pb.grad[j] += g[j];
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Activations

// Exact erf-based GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  static const S kInvSqrt2 = S(1) / std::sqrt(S(2));
  static const S kInvSqrt2Pi = S(1) / std::sqrt(S(2) * S(M_PI));
  std::vector<S> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = S(0.5) * xv[i] * (S(1) + std::erf(xv[i] * kInvSqrt2));
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const S v = p.value[i];
          const S cdf = S(0.5) * (S(1) + std::erf(v * kInvSqrt2));
          const S pdf = std::exp(S(-0.5) * v * v) * kInvSqrt2Pi;
          p.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  std::vector<S> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] > S(0) ? xv[i] : S(0);
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (p.value[i] > S(0)) p.grad[i] += self.grad[i];
      },
      "relu");
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation), x: [B,C,H,W], w: [F,C,kh,kw].
// Realized as im2col + GEMM; the backward pass reuses the column matrix.

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w,
                  std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
  }
  if (stride == 0) throw ValidationError("conv2d: stride must be >= 1");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * padding < kh || wd + 2 * padding < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t ckk = c * kh * kw;
  const std::size_t rows = b * oh * ow;

  auto cols = std::make_shared<std::vector<S>>(rows * ckk, S(0));
  auto xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t row = (bi * oh + oy) * ow + ox;
        S* dst = cols->data() + row * ckk;
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t i = 0; i < kh; ++i) {
            const std::ptrdiff_t y =
                static_cast<std::ptrdiff_t>(oy * stride + i) -
                static_cast<std::ptrdiff_t>(padding);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const std::ptrdiff_t xx =
                  static_cast<std::ptrdiff_t>(ox * stride + j) -
                  static_cast<std::ptrdiff_t>(padding);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(wd)) continue;
              dst[(ci * kh + i) * kw + j] =
                  xv[((bi * c + ci) * h + y) * wd + xx];
            }
          }
        }
      }
    }
  }

  std::vector<S> out(b * f * oh * ow);
  if (rows > 0 && ckk > 0 && f > 0) {
    std::vector<S> out2d(rows * f);
    CMatMap<S> Cols(cols->data(), static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(ckk));
    CMatMap<S> W(w.data().data(), static_cast<Eigen::Index>(f),
                 static_cast<Eigen::Index>(ckk));
    MatMap<S> O(out2d.data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(f));
    O.noalias() = Cols * W.transpose();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t fi = 0; fi < f; ++fi)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox)
            out[((bi * f + fi) * oh + oy) * ow + ox] =
                out2d[((bi * oh + oy) * ow + ox) * f + fi];
  }

  return detail::make_result<S>(
      {b, f, oh, ow}, std::move(out), {x, w},
      [b, c, h, wd, f, kh, kw, oh, ow, ckk, rows, stride, padding,
       cols](NodeT<S>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        if (rows == 0 || ckk == 0 || f == 0) return;
        std::vector<S> g2d(rows * f);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t fi = 0; fi < f; ++fi)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox)
                g2d[((bi * oh + oy) * ow + ox) * f + fi] =
                    self.grad[((bi * f + fi) * oh + oy) * ow + ox];
        CMatMap<S> G(g2d.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(f));
        if (pw.requires_grad) {
          pw.ensure_grad();
          CMatMap<S> Cols(cols->data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(ckk));
          MatMap<S> DW(pw.grad.data(), static_cast<Eigen::Index>(f),
                       static_cast<Eigen::Index>(ckk));
          DW.noalias() += G.transpose() * Cols;
        }
        if (px.requires_grad) {
          px.ensure_grad();
          std::vector<S> dcols(rows * ckk);
          CMatMap<S> W(pw.value.data(), static_cast<Eigen::Index>(f),
                       static_cast<Eigen::Index>(ckk));
          MatMap<S> DC(dcols.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(ckk));
          DC.noalias() = G * W;
          for (std::size_t bi = 0; bi < b; ++bi) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t row = (bi * oh + oy) * ow + ox;
                const S* src = dcols.data() + row * ckk;
                for (std::size_t ci = 0; ci < c; ++ci) {
                  for (std::size_t i = 0; i < kh; ++i) {
                    const std::ptrdiff_t y =
                        static_cast<std::ptrdiff_t>(oy * stride + i) -
                        static_cast<std::ptrdiff_t>(padding);
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t j = 0; j < kw; ++j) {
                      const std::ptrdiff_t xx =
                          static_cast<std::ptrdiff_t>(ox * stride + j) -
                          static_cast<std::ptrdiff_t>(padding);
                      if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(wd))
                        continue;
                      px.grad[((bi * c + ci) * h + y) * wd + xx] +=
                          src[(ci * kh + i) * kw + j];
                    }
                  }
                }
              }
            }
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// Mean cross-entropy over a batch of logits [B,K] against integer labels.

template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits,
                         const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [B,K], got " +
                         shape_str(logits.shape()));
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) +
                          " labels for batch of " + std::to_string(b));
  }
  if (b == 0) throw ValidationError("cross_entropy: empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ValidationError("cross_entropy: label " + std::to_string(y) +
                            " out of range [0," + std::to_string(k) + ")");
    }
  }

  auto probs = std::make_shared<std::vector<S>>(b * k);
  auto lv = logits.data();
  S loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const S* row = lv.data() + i * k;
    S mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    S sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      S e = std::exp(row[j] - mx);
      (*probs)[i * k + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] /= sum;
    loss -= std::log((*probs)[i * k + labels[i]]);
  }
  loss /= static_cast<S>(b);

  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return detail::make_result<S>(
      {1}, {loss}, {logits},
      [b, k, probs, labels_copy](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const S g = self.grad[0] / static_cast<S>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            S v = (*probs)[i * k + j];
            if (static_cast<std::size_t>((*labels_copy)[i]) == j) v -= S(1);
            p.grad[i * k + j] += g * v;
          }
        }
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, std::vector<std::size_t> shape) {
  if (shape_product(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  std::vector<S> out(x.data().begin(), x.data().end());
  return detail::make_result<S>(
      std::move(shape), std::move(out), {x},
      [](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        detail::accumulate(p, self.grad.data(), self.grad.size());
      },
      "reshape");
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(
    const std::vector<std::size_t>& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;)
    strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// out[perm(idx)] = in[idx]
template <typename S>
std::vector<S> permute_raw(const S* in, const std::vector<std::size_t>& shape,
                           const std::vector<std::size_t>& perm,
                           std::vector<std::size_t>& out_shape) {
  out_shape.resize(shape.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = shape[perm[i]];
  const auto in_strides = row_major_strides(shape);
  const auto out_strides = row_major_strides(out_shape);
  const std::size_t n = shape_product(shape);
  std::vector<S> out(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t rem = lin, out_off = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      idx[d] = rem / in_strides[d];
      rem %= in_strides[d];
    }
    for (std::size_t d = 0; d < perm.size(); ++d)
      out_off += idx[perm[d]] * out_strides[d];
    out[out_off] = in[lin];
  }
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> permute(const TensorT<S>& x, std::vector<std::size_t> perm) {
  if (perm.size() != x.rank()) {
    throw ValidationError("permute: perm size " + std::to_string(perm.size()) +
                          " vs rank " + std::to_string(x.rank()));
  }
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p])
      throw ValidationError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> out_shape;
  auto out = detail::permute_raw(x.data().data(), x.shape(), perm, out_shape);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  auto self_shape = out_shape;
  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {x},
      [inv, self_shape](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        std::vector<std::size_t> back_shape;
        auto contrib =
            detail::permute_raw(self.grad.data(), self_shape, inv, back_shape);
        detail::accumulate(p, contrib.data(), contrib.size());
      },
      "permute");
}

// Swap the last two axes; the attention transpose.
template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  std::vector<std::size_t> perm(x.rank());
  for (std::size_t i = 0; i < x.rank(); ++i) perm[i] = i;
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

// ---------------------------------------------------------------------------
// Reductions

// Mean over the last `ndims` axes.
template <typename S>
TensorT<S> mean_last(const TensorT<S>& x, std::size_t ndims) {
  if (ndims == 0 || ndims > x.rank()) {
    throw ValidationError("mean_last: cannot reduce " + std::to_string(ndims) +
                          " axes of " + shape_str(x.shape()));
  }
  std::vector<std::size_t> out_shape(x.shape().begin(),
                                     x.shape().end() - ndims);
  std::size_t count = 1;
  for (std::size_t i = x.rank() - ndims; i < x.rank(); ++i)
    count *= x.dim(i);
  if (count == 0) throw ValidationError("mean_last: reducing empty axes");
  const std::size_t outer = x.size() / count;
  std::vector<S> out(outer, S(0));
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < count; ++t) out[o] += xv[o * count + t];
    out[o] /= static_cast<S>(count);
  }
  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {x},
      [outer, count](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const S g = self.grad[o] / static_cast<S>(count);
          for (std::size_t t = 0; t < count; ++t) p.grad[o * count + t] += g;
        }
      },
      "mean_last");
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  S total = 0;
  for (S v : x.data()) total += v;
  return detail::make_result<S>(
      {1}, {total}, {x},
      [](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i)
          p.grad[i] += self.grad[0];
      },
      "sum_all");
}

// ---------------------------------------------------------------------------
// Token-sequence helpers for the transformer paths

// tokens: [B,T,D], tok: [D] -> [B,T+1,D] with tok at position 0.
template <typename S>
TensorT<S> prepend_token(const TensorT<S>& tokens, const TensorT<S>& tok) {
  if (tokens.rank() != 3 || tok.rank() != 1 ||
      tokens.dim(2) != tok.dim(0)) {
    throw DimensionError("prepend_token: " + shape_str(tokens.shape()) +
                         " vs " + shape_str(tok.shape()));
  }
  const std::size_t b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
  std::vector<S> out(b * (t + 1) * d);
  auto tv = tokens.data(), cv = tok.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy(cv.begin(), cv.end(), out.begin() + bi * (t + 1) * d);
    std::copy(tv.begin() + bi * t * d, tv.begin() + (bi + 1) * t * d,
              out.begin() + bi * (t + 1) * d + d);
  }
  return detail::make_result<S>(
      {b, t + 1, d}, std::move(out), {tokens, tok},
      [b, t, d](NodeT<S>& self) {
        auto& pt = *self.parents[0];
        auto& pc = *self.parents[1];
        if (pt.requires_grad) {
          pt.ensure_grad();
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t i = 0; i < t * d; ++i)
              pt.grad[bi * t * d + i] += self.grad[bi * (t + 1) * d + d + i];
        }
        if (pc.requires_grad) {
          pc.ensure_grad();
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t j = 0; j < d; ++j)
              pc.grad[j] += self.grad[bi * (t + 1) * d + j];
        }
      },
      "prepend_token");
}

// x: [B,T,D] -> [B,D], the embedding at token position `t`.
template <typename S>
TensorT<S> select_token(const TensorT<S>& x, std::size_t t) {
  if (x.rank() != 3 || t >= x.dim(1)) {
    throw DimensionError("select_token: position " + std::to_string(t) +
                         " in " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), tt = x.dim(1), d = x.dim(2);
  std::vector<S> out(b * d);
  auto xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    std::copy(xv.begin() + (bi * tt + t) * d, xv.begin() + (bi * tt + t + 1) * d,
              out.begin() + bi * d);
  return detail::make_result<S>(
      {b, d}, std::move(out), {x},
      [b, tt, t, d](NodeT<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t j = 0; j < d; ++j)
            p.grad[(bi * tt + t) * d + j] += self.grad[bi * d + j];
      },
      "select_token");
}

// tokens: [B,T,D] + pos[offset .. offset+T): broadcast over the batch.
template <typename S>
TensorT<S> add_position(const TensorT<S>& tokens, const TensorT<S>& pos,
                        std::size_t offset) {
  if (tokens.rank() != 3 || pos.rank() != 2 ||
      tokens.dim(2) != pos.dim(1) || offset + tokens.dim(1) > pos.dim(0)) {
    throw DimensionError("add_position: " + shape_str(tokens.shape()) +
                         " vs " + shape_str(pos.shape()) + " at offset " +
                         std::to_string(offset));
  }
  const std::size_t b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
  std::vector<S> out(tokens.size());
  auto tv = tokens.data(), pv = pos.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t j = 0; j < d; ++j)
        out[(bi * t + ti) * d + j] =
            tv[(bi * t + ti) * d + j] + pv[(offset + ti) * d + j];
  return detail::make_result<S>(
      {b, t, d}, std::move(out), {tokens, pos},
      [b, t, d, offset](NodeT<S>& self) {
        auto& pt = *self.parents[0];
        auto& pp = *self.parents[1];
        if (pt.requires_grad)
          detail::accumulate(pt, self.grad.data(), self.grad.size());
        if (pp.requires_grad) {
          pp.ensure_grad();
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t ti = 0; ti < t; ++ti)
              for (std::size_t j = 0; j < d; ++j)
                pp.grad[(offset + ti) * d + j] +=
                    self.grad[(bi * t + ti) * d + j];
        }
      },
      "add_position");
}

}  // namespace fesvibs
