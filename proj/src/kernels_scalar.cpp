#include "maskattn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace maskattn::kernels {
namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void gemm_scalar(const float* a, const float* b, float* c, int64_t m, int64_t n,
                 int64_t k, bool trans_a, bool trans_b, float beta) {
  auto A = [&](int64_t i, int64_t p) { return trans_a ? a[p * m + i] : a[i * k + p]; };
  auto B = [&](int64_t p, int64_t j) { return trans_b ? b[j * k + p] : b[p * n + j]; };
  parallel_for(0, m, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      float* crow = c + i * n;
      if (beta == 0.0f) std::memset(crow, 0, sizeof(float) * n);
      else if (beta != 1.0f) for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
      for (int64_t p = 0; p < k; ++p) {
        const float aip = A(i, p);
        if (!trans_b) {
          const float* brow = b + p * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        } else {
          for (int64_t j = 0; j < n; ++j) crow[j] += aip * B(p, j);
        }
      }
    }
  });
}

void add_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
void mul_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
void axpy_scalar(float alpha, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void scale_scalar(const float* x, float alpha, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}
float dot_scalar(const float* a, const float* b, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += double(a[i]) * b[i];
  return float(s);
}
float sum_scalar(const float* x, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return float(s);
}
void exp_scalar(const float* x, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
}

void softmax_rows_scalar(const float* x, float* out, int64_t rows, int64_t cols) {
  parallel_for(0, rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const float* xr = x + r * cols;
      float* yr = out + r * cols;
      float mx = xr[0];
      for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
      float denom = 0;
      for (int64_t j = 0; j < cols; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        denom += yr[j];
      }
      const float inv = 1.0f / denom;
      for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
  });
}

void gelu_scalar(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = float(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
}

void gelu_grad_scalar(const float* x, const float* gout, float* gx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    gx[i] += gout[i] * float(phi + v * pdf);
  }
}

}  // namespace

const DispatchF32& f32_scalar() {
  static const DispatchF32 table = {
      gemm_scalar, add_scalar,  mul_scalar,          axpy_scalar, scale_scalar,
      dot_scalar,  sum_scalar,  exp_scalar,          softmax_rows_scalar,
      gelu_scalar, gelu_grad_scalar,
  };
  return table;
}

void dgemm(const double* a, const double* b, double* c, int64_t m, int64_t n,
           int64_t k, bool trans_a, bool trans_b, double beta) {
  auto A = [&](int64_t i, int64_t p) { return trans_a ? a[p * m + i] : a[i * k + p]; };
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (beta == 0.0) std::memset(crow, 0, sizeof(double) * n);
    else if (beta != 1.0) for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (!trans_b) {
        const double* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * b[j * k + p];
      }
    }
  }
}

}  // namespace maskattn::kernels
