#pragma once

// Differentiable operator set on Tensor<T>. Forward math runs through the
// kernels layer (scalar or SIMD); backward rules are recorded on the tape.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "maskattn/kernels.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn::ops {

namespace detail {

inline void gemm(const float* a, const float* b, float* c, int64_t m, int64_t n,
                 int64_t k, bool ta, bool tb, float beta) {
  kernels::f32().gemm(a, b, c, m, n, k, ta, tb, beta);
}
inline void gemm(const double* a, const double* b, double* c, int64_t m,
                 int64_t n, int64_t k, bool ta, bool tb, double beta) {
  kernels::dgemm(a, b, c, m, n, k, ta, tb, beta);
}

inline void vadd(const float* a, const float* b, float* o, int64_t n) { kernels::f32().add(a, b, o, n); }
inline void vmul(const float* a, const float* b, float* o, int64_t n) { kernels::f32().mul(a, b, o, n); }
inline void vaxpy(float al, const float* x, float* y, int64_t n) { kernels::f32().axpy(al, x, y, n); }
inline void vscale(const float* x, float al, float* o, int64_t n) { kernels::f32().scale(x, al, o, n); }
inline float vsum(const float* x, int64_t n) { return kernels::f32().sum(x, n); }
inline void vsoftmax_rows(const float* x, float* o, int64_t r, int64_t c) { kernels::f32().softmax_rows(x, o, r, c); }
inline void vgelu(const float* x, float* y, int64_t n) { kernels::f32().gelu(x, y, n); }
inline void vgelu_grad(const float* x, const float* g, float* gx, int64_t n) { kernels::f32().gelu_grad(x, g, gx, n); }

inline void vadd(const double* a, const double* b, double* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}
inline void vmul(const double* a, const double* b, double* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}
inline void vaxpy(double al, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += al * x[i];
}
inline void vscale(const double* x, double al, double* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = x[i] * al;
}
inline double vsum(const double* x, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}
inline void vsoftmax_rows(const double* x, double* o, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = o + r * cols;
    double mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double denom = 0;
    for (int64_t j = 0; j < cols; ++j) denom += yr[j] = std::exp(xr[j] - mx);
    for (int64_t j = 0; j < cols; ++j) yr[j] /= denom;
  }
}
inline void vgelu(const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    y[i] = x[i] * 0.5 * (1.0 + std::erf(x[i] * 0.7071067811865475244));
}
inline void vgelu_grad(const double* x, const double* g, double* gx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const double phi = 0.5 * (1.0 + std::erf(x[i] * 0.7071067811865475244));
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x[i] * x[i]);
    gx[i] += g[i] * (phi + x[i] * pdf);
  }
}

inline Shape batch_shape(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::vadd(a.data(), b.data(), out.mutable_data(), a.size());
  Tape<T>* tape = result_tape<T>({&a, &b});
  if (!tape) return out;
  const int an = a.node(), bn = b.node();
  const int64_t n = a.size();
  return tape->attach(std::move(out), [an, bn, n](Tape<T>& tp, const std::vector<T>& g) {
    if (an >= 0) detail::vaxpy(T(1), g.data(), tp.grad_buf(an).data(), n);
    if (bn >= 0) detail::vaxpy(T(1), g.data(), tp.grad_buf(bn).data(), n);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("sub: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] - b.data()[i];
  Tape<T>* tape = result_tape<T>({&a, &b});
  if (!tape) return out;
  const int an = a.node(), bn = b.node();
  return tape->attach(std::move(out), [an, bn, n](Tape<T>& tp, const std::vector<T>& g) {
    if (an >= 0) detail::vaxpy(T(1), g.data(), tp.grad_buf(an).data(), n);
    if (bn >= 0) detail::vaxpy(T(-1), g.data(), tp.grad_buf(bn).data(), n);
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::vmul(a.data(), b.data(), out.mutable_data(), a.size());
  Tape<T>* tape = result_tape<T>({&a, &b});
  if (!tape) return out;
  const int an = a.node(), bn = b.node();
  const int64_t n = a.size();
  auto ad = a.storage(), bd = b.storage();
  return tape->attach(std::move(out), [an, bn, n, ad, bd](Tape<T>& tp, const std::vector<T>& g) {
    if (an >= 0) {
      auto& ga = tp.grad_buf(an);
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * (*bd)[size_t(i)];
    }
    if (bn >= 0) {
      auto& gb = tp.grad_buf(bn);
      for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += g[size_t(i)] * (*ad)[size_t(i)];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::vscale(a.data(), alpha, out.mutable_data(), a.size());
  Tape<T>* tape = result_tape<T>({&a});
  if (!tape) return out;
  const int an = a.node();
  const int64_t n = a.size();
  return tape->attach(std::move(out), [an, alpha, n](Tape<T>& tp, const std::vector<T>& g) {
    if (an >= 0) detail::vaxpy(alpha, g.data(), tp.grad_buf(an).data(), n);
  });
}

// x[..., N] + b[N]
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || x.dim(-1) != b.dim(0))
    throw DimensionError("add_rowvec: bias shape mismatch");
  const int64_t n = b.dim(0), rows = x.size() / n;
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    detail::vadd(x.data() + r * n, b.data(), out.mutable_data() + r * n, n);
  Tape<T>* tape = result_tape<T>({&x, &b});
  if (!tape) return out;
  const int xn = x.node(), bn = b.node();
  return tape->attach(std::move(out), [xn, bn, rows, n](Tape<T>& tp, const std::vector<T>& g) {
    if (xn >= 0) detail::vaxpy(T(1), g.data(), tp.grad_buf(xn).data(), rows * n);
    if (bn >= 0) {
      auto& gb = tp.grad_buf(bn);
      for (int64_t r = 0; r < rows; ++r)
        detail::vaxpy(T(1), g.data() + r * n, gb.data(), n);
    }
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a: [..., m, k]; b: [..., k, n] with equal batch dims, or [k, n] shared.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul: rank < 2");
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    throw DimensionError("matmul: inner dims disagree " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && detail::batch_shape(a.shape()) != detail::batch_shape(b.shape()))
    throw DimensionError("matmul: batch dims disagree");
  const int64_t batch = a.size() / (m * k);

  Shape out_shape(detail::batch_shape(a.shape()));
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out = Tensor<T>::uninit(std::move(out_shape));
  for (int64_t i = 0; i < batch; ++i)
    detail::gemm(a.data() + i * m * k, b.data() + (shared_b ? 0 : i * k * n),
                 out.mutable_data() + i * m * n, m, n, k, false, false, T(0));

  Tape<T>* tape = result_tape<T>({&a, &b});
  if (!tape) return out;
  const int an = a.node(), bn = b.node();
  auto ad = a.storage(), bd = b.storage();
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    if (an >= 0) {
      auto& ga = tp.grad_buf(an);
      for (int64_t i = 0; i < batch; ++i)
        detail::gemm(g.data() + i * m * n, bd->data() + (shared_b ? 0 : i * k * n),
                     ga.data() + i * m * k, m, k, n, false, true, T(1));
    }
    if (bn >= 0) {
      auto& gb = tp.grad_buf(bn);
      for (int64_t i = 0; i < batch; ++i)
        detail::gemm(ad->data() + i * m * k, g.data() + i * m * n,
                     gb.data() + (shared_b ? 0 : i * k * n), k, n, m, true, false, T(1));
    }
  });
}

// x[..., K] * w[K, N] + b[N]; bias optional (pass empty tensor).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int64_t kdim = x.dim(-1);
  Tensor<T> x2 = x.reshape({x.size() / kdim, kdim});
  Tensor<T> y = matmul(x2, w);
  if (b.size() > 0) y = add_rowvec(y, b);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(-1);
  return y.reshape(std::move(out_shape));
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

// [..., A, B] -> [..., B, A]
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  const int64_t a = x.dim(-2), b = x.dim(-1);
  const int64_t batch = x.size() / (a * b);
  Shape s = x.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor<T> out = Tensor<T>::uninit(std::move(s));
  const T* src = x.data();
  T* dst = out.mutable_data();
  for (int64_t i = 0; i < batch; ++i)
    for (int64_t r = 0; r < a; ++r)
      for (int64_t c = 0; c < b; ++c)
        dst[i * a * b + c * a + r] = src[i * a * b + r * b + c];
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  return tape->attach(std::move(out), [xn, batch, a, b](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t i = 0; i < batch; ++i)
      for (int64_t c = 0; c < b; ++c)
        for (int64_t r = 0; r < a; ++r)
          gx[size_t(i * a * b + r * b + c)] += g[size_t(i * a * b + c * a + r)];
  });
}

// [A, B, C, D] -> [A, C, B, D]
template <class T>
Tensor<T> transpose_12(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("transpose_12: rank must be 4");
  const int64_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor<T> out = Tensor<T>::uninit(Shape{A, C, B, D});
  const T* src = x.data();
  T* dst = out.mutable_data();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        std::memcpy(dst + ((a * C + c) * B + b) * D, src + ((a * B + b) * C + c) * D,
                    sizeof(T) * size_t(D));
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  return tape->attach(std::move(out), [xn, A, B, C, D](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t a = 0; a < A; ++a)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t b = 0; b < B; ++b)
          detail::vaxpy(T(1), g.data() + ((a * C + c) * B + b) * D,
                        gx.data() + ((a * B + b) * C + c) * D, D);
  });
}

// [B, C1, H, W] ++ [B, C2, H, W] -> [B, C1+C2, H, W]
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: incompatible shapes");
  const int64_t B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1);
  const int64_t hw = a.dim(2) * a.dim(3);
  Tensor<T> out = Tensor<T>::uninit(Shape{B, C1 + C2, a.dim(2), a.dim(3)});
  T* dst = out.mutable_data();
  for (int64_t i = 0; i < B; ++i) {
    std::memcpy(dst + i * (C1 + C2) * hw, a.data() + i * C1 * hw, sizeof(T) * size_t(C1 * hw));
    std::memcpy(dst + i * (C1 + C2) * hw + C1 * hw, b.data() + i * C2 * hw,
                sizeof(T) * size_t(C2 * hw));
  }
  Tape<T>* tape = result_tape<T>({&a, &b});
  if (!tape) return out;
  const int an = a.node(), bn = b.node();
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    for (int64_t i = 0; i < B; ++i) {
      if (an >= 0)
        detail::vaxpy(T(1), g.data() + i * (C1 + C2) * hw,
                      tp.grad_buf(an).data() + i * C1 * hw, C1 * hw);
      if (bn >= 0)
        detail::vaxpy(T(1), g.data() + i * (C1 + C2) * hw + C1 * hw,
                      tp.grad_buf(bn).data() + i * C2 * hw, C2 * hw);
    }
  });
}

// ---------------------------------------------------------------------------
// conv / pool / upsample
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* x, T* col, int64_t cin, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t hout, int64_t wout) {
  const int64_t hw_out = hout * wout;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* crow = col + ((c * kh + ky) * kw + kx) * hw_out;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(crow + oy * wout, crow + (oy + 1) * wout, T(0));
            continue;
          }
          const T* xrow = x + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wout; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            crow[oy * wout + ox] = (ix < 0 || ix >= w) ? T(0) : xrow[ix];
          }
        }
      }
}

template <class T>
void col2im_acc(const T* col, T* gx, int64_t cin, int64_t h, int64_t w, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t hout, int64_t wout) {
  const int64_t hw_out = hout * wout;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* crow = col + ((c * kh + ky) * kw + kx) * hw_out;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* xrow = gx + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wout; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) xrow[ix] += crow[oy * wout + ox];
          }
        }
      }
}

}  // namespace detail

// x[B,Cin,H,W], w[Cout,Cin,kh,kw], bias[Cout] (optional, empty to skip).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("conv2d: rank must be 4");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const int64_t B = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw DimensionError("conv2d: channel mismatch");
  if (bias.size() > 0 && bias.dim(0) != cout) throw DimensionError("conv2d: bias mismatch");
  if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0 ||
      h + 2 * pad < kh || wd + 2 * pad < kw)
    throw DimensionError("conv2d: non-integral output size");
  const int64_t hout = (h + 2 * pad - kh) / stride + 1;
  const int64_t wout = (wd + 2 * pad - kw) / stride + 1;
  const int64_t K = cin * kh * kw, hw_out = hout * wout;

  Tensor<T> out = Tensor<T>::uninit(Shape{B, cout, hout, wout});
  TensorStorage<T> col(size_t(K * hw_out));
  for (int64_t i = 0; i < B; ++i) {
    detail::im2col(x.data() + i * cin * h * wd, col.data(), cin, h, wd, kh, kw,
                   stride, pad, hout, wout);
    detail::gemm(w.data(), col.data(), out.mutable_data() + i * cout * hw_out,
                 cout, hw_out, K, false, false, T(0));
    if (bias.size() > 0) {
      T* orow = out.mutable_data() + i * cout * hw_out;
      for (int64_t c = 0; c < cout; ++c)
        for (int64_t j = 0; j < hw_out; ++j) orow[c * hw_out + j] += bias.data()[c];
    }
  }

  Tape<T>* tape = result_tape<T>({&x, &w, &bias});
  if (!tape) return out;
  const int xn = x.node(), wn = w.node(), biasn = bias.size() > 0 ? bias.node() : -1;
  auto xd = x.storage(), wdata = w.storage();
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    TensorStorage<T> col(size_t(K * hw_out));
    for (int64_t i = 0; i < B; ++i) {
      const T* gi = g.data() + i * cout * hw_out;
      if (wn >= 0) {
        detail::im2col(xd->data() + i * cin * h * wd, col.data(), cin, h, wd, kh,
                       kw, stride, pad, hout, wout);
        detail::gemm(gi, col.data(), tp.grad_buf(wn).data(), cout, K, hw_out,
                     false, true, T(1));
      }
      if (xn >= 0) {
        detail::gemm(wdata->data(), gi, col.data(), K, hw_out, cout, true, false, T(0));
        detail::col2im_acc(col.data(), tp.grad_buf(xn).data() + i * cin * h * wd,
                           cin, h, wd, kh, kw, stride, pad, hout, wout);
      }
      if (biasn >= 0) {
        auto& gb = tp.grad_buf(biasn);
        for (int64_t c = 0; c < cout; ++c)
          gb[size_t(c)] += detail::vsum(gi + c * hw_out, hw_out);
      }
    }
  });
}

// 2x2 max pooling, stride 2; first element in row-major scan wins ties.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("maxpool2d: rank must be 4");
  const int64_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("maxpool2d: odd spatial dims");
  const int64_t ho = h / 2, wo = w / 2;
  Tensor<T> out = Tensor<T>::uninit(Shape{B, C, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.size()));
  const T* src = x.data();
  T* dst = out.mutable_data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* plane = src + bc * h * w;
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox) {
        const int64_t base = 2 * oy * w + 2 * ox;
        const int64_t cand[4] = {base, base + 1, base + w, base + w + 1};
        int64_t best = cand[0];
        for (int t = 1; t < 4; ++t)
          if (plane[cand[t]] > plane[best]) best = cand[t];
        const int64_t oi = bc * ho * wo + oy * wo + ox;
        dst[oi] = plane[best];
        (*argmax)[size_t(oi)] = bc * h * w + best;
      }
  }
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  const int64_t on = out.size();
  return tape->attach(std::move(out), [xn, argmax, on](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t i = 0; i < on; ++i) gx[size_t((*argmax)[size_t(i)])] += g[size_t(i)];
  });
}

namespace detail {

// half-pixel-center source coordinate for 2x upsampling, clamped
inline void up2_coords(int64_t i, int64_t n, int64_t& i0, int64_t& i1, double& w1) {
  const double s = (double(i) + 0.5) / 2.0 - 0.5;
  const double f = std::floor(s);
  i0 = std::clamp(int64_t(f), int64_t(0), n - 1);
  i1 = std::clamp(int64_t(f) + 1, int64_t(0), n - 1);
  w1 = s - f;
}

}  // namespace detail

// bilinear 2x upsampling (half-pixel centers, edge-clamped)
template <class T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample: rank must be 4");
  const int64_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t ho = h * 2, wo = w * 2;
  Tensor<T> out = Tensor<T>::uninit(Shape{B, C, ho, wo});
  const T* src = x.data();
  T* dst = out.mutable_data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* plane = src + bc * h * w;
    T* oplane = dst + bc * ho * wo;
    for (int64_t oy = 0; oy < ho; ++oy) {
      int64_t y0, y1;
      double wy;
      detail::up2_coords(oy, h, y0, y1, wy);
      for (int64_t ox = 0; ox < wo; ++ox) {
        int64_t x0, x1;
        double wx;
        detail::up2_coords(ox, w, x0, x1, wx);
        const double v = (1 - wy) * ((1 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1]) +
                         wy * ((1 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
        oplane[oy * wo + ox] = T(v);
      }
    }
  }
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  return tape->attach(std::move(out), [xn, B, C, h, w, ho, wo](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* gplane = gx.data() + bc * h * w;
      const T* goplane = g.data() + bc * ho * wo;
      for (int64_t oy = 0; oy < ho; ++oy) {
        int64_t y0, y1;
        double wy;
        detail::up2_coords(oy, h, y0, y1, wy);
        for (int64_t ox = 0; ox < wo; ++ox) {
          int64_t x0, x1;
          double wx;
          detail::up2_coords(ox, w, x0, x1, wx);
          const T go = goplane[oy * wo + ox];
          gplane[y0 * w + x0] += T((1 - wy) * (1 - wx)) * go;
          gplane[y0 * w + x1] += T((1 - wy) * wx) * go;
          gplane[y1 * w + x0] += T(wy * (1 - wx)) * go;
          gplane[y1 * w + x1] += T(wy * wx) * go;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// nonlinearities and normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const int64_t cols = x.dim(-1), rows = x.size() / cols;
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  detail::vsoftmax_rows(x.data(), out.mutable_data(), rows, cols);
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  auto yd = out.storage();
  return tape->attach(std::move(out), [xn, rows, cols, yd](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = yd->data() + r * cols;
      const T* gr = g.data() + r * cols;
      T dotv = 0;
      for (int64_t j = 0; j < cols; ++j) dotv += yr[j] * gr[j];
      T* gxr = gx.data() + r * cols;
      for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dotv);
    }
  });
}

// exact-erf GELU: x * Phi(x)
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  detail::vgelu(x.data(), out.mutable_data(), x.size());
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  const int64_t n = x.size();
  auto xd = x.storage();
  return tape->attach(std::move(out), [xn, n, xd](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    detail::vgelu_grad(xd->data(), g.data(), tp.grad_buf(xn).data(), n);
  });
}

// log(sigmoid(x) + eps); stays finite and differentiable for closed gates
template <class T>
Tensor<T> log_sigmoid_eps(const Tensor<T>& x, T eps) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  const int64_t n = x.size();
  auto sig = std::make_shared<std::vector<T>>(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const double v = double(x.data()[i]);
    const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    (*sig)[size_t(i)] = T(s);
    out.mutable_data()[i] = T(std::log(s + double(eps)));
  }
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  return tape->attach(std::move(out), [xn, n, sig, eps](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t i = 0; i < n; ++i) {
      const T s = (*sig)[size_t(i)];
      gx[size_t(i)] += g[size_t(i)] * s * (T(1) - s) / (s + eps);
    }
  });
}

// scores[B,H,Q,K] + m[B,H,1,K] (key-wise bias broadcast over queries)
template <class T>
Tensor<T> add_key_bias(const Tensor<T>& scores, const Tensor<T>& m) {
  if (scores.rank() != 4 || m.rank() != 4 || m.dim(2) != 1 ||
      scores.dim(0) != m.dim(0) || scores.dim(1) != m.dim(1) || scores.dim(3) != m.dim(3))
    throw DimensionError("add_key_bias: incompatible shapes");
  const int64_t BH = scores.dim(0) * scores.dim(1), Q = scores.dim(2), K = scores.dim(3);
  Tensor<T> out = Tensor<T>::uninit(scores.shape());
  for (int64_t i = 0; i < BH; ++i)
    for (int64_t q = 0; q < Q; ++q)
      detail::vadd(scores.data() + (i * Q + q) * K, m.data() + i * K,
                   out.mutable_data() + (i * Q + q) * K, K);
  Tape<T>* tape = result_tape<T>({&scores, &m});
  if (!tape) return out;
  const int sn = scores.node(), mn = m.node();
  return tape->attach(std::move(out), [sn, mn, BH, Q, K](Tape<T>& tp, const std::vector<T>& g) {
    if (sn >= 0) detail::vaxpy(T(1), g.data(), tp.grad_buf(sn).data(), BH * Q * K);
    if (mn >= 0) {
      auto& gm = tp.grad_buf(mn);
      for (int64_t i = 0; i < BH; ++i)
        for (int64_t q = 0; q < Q; ++q)
          detail::vaxpy(T(1), g.data() + (i * Q + q) * K, gm.data() + i * K, K);
    }
  });
}

// softmax(alpha*scores + m) over the last dim in one pass; m is an optional
// key-wise bias [B,H,1,K] broadcast over queries (empty tensor = no bias).
// Fusing avoids materializing the scaled and biased [B,H,Q,K] intermediates,
// which dominate memory traffic at large token counts.
template <class T>
Tensor<T> masked_softmax_lastdim(const Tensor<T>& scores, const Tensor<T>& m, T alpha) {
  if (scores.rank() != 4) throw DimensionError("masked_softmax: rank must be 4");
  const bool has_m = m.size() > 0;
  if (has_m && (m.rank() != 4 || m.dim(2) != 1 || scores.dim(0) != m.dim(0) ||
                scores.dim(1) != m.dim(1) || scores.dim(3) != m.dim(3)))
    throw DimensionError("masked_softmax: incompatible mask shape");
  const int64_t BH = scores.dim(0) * scores.dim(1), Q = scores.dim(2), K = scores.dim(3);

  Tensor<T> out = Tensor<T>::uninit(scores.shape());
  for (int64_t i = 0; i < BH; ++i) {
    const T* mrow = has_m ? m.data() + i * K : nullptr;
    for (int64_t q = 0; q < Q; ++q) {
      const T* src = scores.data() + (i * Q + q) * K;
      T* dst = out.mutable_data() + (i * Q + q) * K;
      if (mrow)
        for (int64_t j = 0; j < K; ++j) dst[j] = alpha * src[j] + mrow[j];
      else
        for (int64_t j = 0; j < K; ++j) dst[j] = alpha * src[j];
    }
  }
  detail::vsoftmax_rows(out.data(), out.mutable_data(), BH * Q, K);

  Tape<T>* tape = has_m ? result_tape<T>({&scores, &m}) : result_tape<T>({&scores});
  if (!tape) return out;
  const int sn = scores.node(), mn = has_m ? m.node() : -1;
  auto yd = out.storage();
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    if (sn < 0 && mn < 0) return;
    T* gs = sn >= 0 ? tp.grad_buf(sn).data() : nullptr;
    T* gm = mn >= 0 ? tp.grad_buf(mn).data() : nullptr;
    for (int64_t i = 0; i < BH; ++i) {
      for (int64_t q = 0; q < Q; ++q) {
        const T* yr = yd->data() + (i * Q + q) * K;
        const T* gr = g.data() + (i * Q + q) * K;
        T dotv = 0;
        for (int64_t j = 0; j < K; ++j) dotv += yr[j] * gr[j];
        if (gs) {
          T* gsr = gs + (i * Q + q) * K;
          for (int64_t j = 0; j < K; ++j) gsr[j] += alpha * yr[j] * (gr[j] - dotv);
        }
        if (gm) {
          T* gmr = gm + i * K;
          for (int64_t j = 0; j < K; ++j) gmr[j] += yr[j] * (gr[j] - dotv);
        }
      }
    }
  });
}

// GroupNorm over [B,C,H,W] with per-channel affine.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     int64_t groups, T eps = T(1e-5)) {
  if (x.rank() != 4) throw DimensionError("group_norm: rank must be 4");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (C % groups != 0) throw DimensionError("group_norm: C not divisible by groups");
  if (gamma.dim(0) != C || beta.dim(0) != C) throw DimensionError("group_norm: affine mismatch");
  const int64_t cpg = C / groups, gsize = cpg * hw;

  Tensor<T> out = Tensor<T>::uninit(x.shape());
  auto mean = std::make_shared<std::vector<T>>(size_t(B * groups));
  auto istd = std::make_shared<std::vector<T>>(size_t(B * groups));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < groups; ++g) {
      const T* gx = x.data() + (b * C + g * cpg) * hw;
      double mu = 0;
      for (int64_t i = 0; i < gsize; ++i) mu += gx[i];
      mu /= double(gsize);
      double var = 0;
      for (int64_t i = 0; i < gsize; ++i) {
        const double d = gx[i] - mu;
        var += d * d;
      }
      var /= double(gsize);
      const double is = 1.0 / std::sqrt(var + double(eps));
      (*mean)[size_t(b * groups + g)] = T(mu);
      (*istd)[size_t(b * groups + g)] = T(is);
      T* gy = out.mutable_data() + (b * C + g * cpg) * hw;
      for (int64_t c = 0; c < cpg; ++c) {
        const T ga = gamma.data()[g * cpg + c], be = beta.data()[g * cpg + c];
        for (int64_t i = 0; i < hw; ++i)
          gy[c * hw + i] = ga * T((gx[c * hw + i] - mu) * is) + be;
      }
    }

  Tape<T>* tape = result_tape<T>({&x, &gamma, &beta});
  if (!tape) return out;
  const int xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xd = x.storage(), gammad = gamma.storage();
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    std::vector<T> xhat(static_cast<size_t>(gsize)), dxh(static_cast<size_t>(gsize));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t gi = 0; gi < groups; ++gi) {
        const T* gx = xd->data() + (b * C + gi * cpg) * hw;
        const T* gy = g.data() + (b * C + gi * cpg) * hw;
        const T mu = (*mean)[size_t(b * groups + gi)];
        const T is = (*istd)[size_t(b * groups + gi)];
        for (int64_t c = 0; c < cpg; ++c)
          for (int64_t i = 0; i < hw; ++i)
            xhat[size_t(c * hw + i)] = (gx[c * hw + i] - mu) * is;
        if (gn >= 0 || bn >= 0) {
          for (int64_t c = 0; c < cpg; ++c) {
            T dgam = 0, dbet = 0;
            for (int64_t i = 0; i < hw; ++i) {
              dgam += gy[c * hw + i] * xhat[size_t(c * hw + i)];
              dbet += gy[c * hw + i];
            }
            if (gn >= 0) tp.grad_buf(gn)[size_t(gi * cpg + c)] += dgam;
            if (bn >= 0) tp.grad_buf(bn)[size_t(gi * cpg + c)] += dbet;
          }
        }
        if (xn >= 0) {
          double m1 = 0, m2 = 0;
          for (int64_t c = 0; c < cpg; ++c) {
            const T ga = gammad->data()[gi * cpg + c];
            for (int64_t i = 0; i < hw; ++i) {
              const T v = gy[c * hw + i] * ga;
              dxh[size_t(c * hw + i)] = v;
              m1 += v;
              m2 += double(v) * xhat[size_t(c * hw + i)];
            }
          }
          m1 /= double(gsize);
          m2 /= double(gsize);
          auto& gxb = tp.grad_buf(xn);
          T* dst = gxb.data() + (b * C + gi * cpg) * hw;
          for (int64_t i = 0; i < gsize; ++i)
            dst[i] += is * T(dxh[size_t(i)] - m1 - xhat[size_t(i)] * m2);
        }
      }
  });
}

// L2-normalize across the channel axis of [B,C,H,W].
template <class T>
Tensor<T> l2_normalize_channel(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x.rank() != 4) throw DimensionError("l2_normalize_channel: rank must be 4");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  auto rnorm = std::make_shared<std::vector<T>>(size_t(B * hw));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      const T* v = x.data() + b * C * hw + p;
      double sq = 0;
      for (int64_t c = 0; c < C; ++c) sq += double(v[c * hw]) * v[c * hw];
      const double r = 1.0 / std::sqrt(sq + double(eps));
      (*rnorm)[size_t(b * hw + p)] = T(r);
      T* o = out.mutable_data() + b * C * hw + p;
      for (int64_t c = 0; c < C; ++c) o[c * hw] = T(v[c * hw] * r);
    }
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  auto xd = x.storage();
  return tape->attach(std::move(out), [xn, B, C, hw, rnorm, xd](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < hw; ++p) {
        const T* v = xd->data() + b * C * hw + p;
        const T* go = g.data() + b * C * hw + p;
        const double r = double((*rnorm)[size_t(b * hw + p)]);
        double vg = 0;
        for (int64_t c = 0; c < C; ++c) vg += double(v[c * hw]) * go[c * hw];
        T* dst = gx.data() + b * C * hw + p;
        for (int64_t c = 0; c < C; ++c)
          dst[c * hw] += T(r * go[c * hw] - r * r * r * vg * v[c * hw]);
      }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  out.mutable_data()[0] = detail::vsum(x.data(), x.size());
  Tape<T>* tape = result_tape<T>({&x});
  if (!tape) return out;
  const int xn = x.node();
  const int64_t n = x.size();
  return tape->attach(std::move(out), [xn, n](Tape<T>& tp, const std::vector<T>& g) {
    if (xn < 0) return;
    auto& gx = tp.grad_buf(xn);
    for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |cd|, 1e-8). f must be scalar-valued.
template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps) {
  Tape<T> tape;
  Tensor<T> xw = tape.watch(x);
  Tensor<T> y = f(xw);
  if (y.size() != 1) throw DimensionError("grad_check: f must be scalar-valued");
  if (!std::isfinite(double(y.value()))) throw std::runtime_error("grad_check: non-finite f(x)");
  tape.backward(y);
  const std::vector<T> analytic = tape.grad(xw);

  Tensor<T> xp(x.shape(), std::vector<T>(x.data(), x.data() + x.size()));
  T worst = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const T orig = xp.data()[i];
    xp.mutable_data()[i] = orig + eps;
    const T fp = f(xp).value();
    xp.mutable_data()[i] = orig - eps;
    const T fm = f(xp).value();
    xp.mutable_data()[i] = orig;
    const T cd = (fp - fm) / (2 * eps);
    const T a = analytic[size_t(i)];
    const T denom = std::max({std::abs(a), std::abs(cd), T(1e-8)});
    worst = std::max(worst, std::abs(a - cd) / denom);
  }
  return worst;
}

}  // namespace maskattn::ops
