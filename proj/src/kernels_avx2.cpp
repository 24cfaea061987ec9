#include "maskattn/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace maskattn::kernels {
namespace {

// ---------------------------------------------------------------------------
// vectorized exp, max relative error ~2 ulp (range-reduced degree-5 poly)
// ---------------------------------------------------------------------------
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-87.3365478515625f);
  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);

  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);

  __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  __m256 z = _mm256_fnmadd_ps(fx, c1, x);
  z = _mm256_fnmadd_ps(fx, c2, z);

  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, z, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, z, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, z, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, z, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, z, _mm256_set1_ps(5.0000001201e-1f));
  __m256 zz = _mm256_mul_ps(z, z);
  y = _mm256_fmadd_ps(y, zz, _mm256_add_ps(z, _mm256_set1_ps(1.0f)));

  __m256i n = _mm256_cvtps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

// erf via the Abramowitz-Stegun 7.1.26 rational form, |abs err| < 1.5e-7
inline __m256 erf256(__m256 x) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  __m256 sign = _mm256_and_ps(x, sign_mask);
  __m256 a = _mm256_andnot_ps(sign_mask, x);

  const __m256 p = _mm256_set1_ps(0.3275911f);
  __m256 t = _mm256_div_ps(_mm256_set1_ps(1.0f),
                           _mm256_fmadd_ps(p, a, _mm256_set1_ps(1.0f)));
  __m256 y = _mm256_set1_ps(1.061405429f);
  y = _mm256_fmadd_ps(y, t, _mm256_set1_ps(-1.453152027f));
  y = _mm256_fmadd_ps(y, t, _mm256_set1_ps(1.421413741f));
  y = _mm256_fmadd_ps(y, t, _mm256_set1_ps(-0.284496736f));
  y = _mm256_fmadd_ps(y, t, _mm256_set1_ps(0.254829592f));
  y = _mm256_mul_ps(y, t);
  __m256 e = exp256(_mm256_mul_ps(_mm256_sub_ps(_mm256_setzero_ps(), a), a));
  __m256 r = _mm256_fnmadd_ps(y, e, _mm256_set1_ps(1.0f));
  return _mm256_or_ps(r, sign);
}

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

// ---------------------------------------------------------------------------
// packed GEMM, 6x16 microkernel
// ---------------------------------------------------------------------------
constexpr int64_t MR = 6, NR = 16;
constexpr int64_t KC = 256, MC = 132, NC = 1024;

// A block (mc x kc, possibly transposed source) packed into MR-row panels.
void pack_a(const float* a, float* ap, int64_t lda, int64_t mc, int64_t kc,
            bool trans, int64_t m_total) {
  (void)m_total;
  for (int64_t ir = 0; ir < mc; ir += MR) {
    const int64_t mr = std::min(MR, mc - ir);
    for (int64_t p = 0; p < kc; ++p) {
      for (int64_t r = 0; r < MR; ++r) {
        float v = 0.0f;
        if (r < mr) v = trans ? a[p * lda + (ir + r)] : a[(ir + r) * lda + p];
        *ap++ = v;
      }
    }
  }
}

// B block (kc x nc, possibly transposed source) packed into NR-col panels.
void pack_b(const float* b, float* bp, int64_t ldb, int64_t kc, int64_t nc,
            bool trans) {
  for (int64_t jr = 0; jr < nc; jr += NR) {
    const int64_t nr = std::min(NR, nc - jr);
    for (int64_t p = 0; p < kc; ++p) {
      for (int64_t cidx = 0; cidx < NR; ++cidx) {
        float v = 0.0f;
        if (cidx < nr) v = trans ? b[(jr + cidx) * ldb + p] : b[p * ldb + jr + cidx];
        *bp++ = v;
      }
    }
  }
}

inline void micro_6x16(const float* ap, const float* bp, int64_t kc, float* c,
                       int64_t ldc, int64_t mr, int64_t nr, float beta) {
  __m256 acc[MR][2];
  for (int r = 0; r < MR; ++r) {
    acc[r][0] = _mm256_setzero_ps();
    acc[r][1] = _mm256_setzero_ps();
  }
  for (int64_t p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp + p * NR);
    const __m256 b1 = _mm256_loadu_ps(bp + p * NR + 8);
    const float* arow = ap + p * MR;
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_set1_ps(arow[r]);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  if (mr == MR && nr == NR) {
    for (int r = 0; r < MR; ++r) {
      float* crow = c + r * ldc;
      __m256 c0 = _mm256_loadu_ps(crow);
      __m256 c1 = _mm256_loadu_ps(crow + 8);
      if (beta == 0.0f) {
        c0 = acc[r][0];
        c1 = acc[r][1];
      } else {
        const __m256 bv = _mm256_set1_ps(beta);
        c0 = _mm256_fmadd_ps(c0, bv, acc[r][0]);
        c1 = _mm256_fmadd_ps(c1, bv, acc[r][1]);
      }
      _mm256_storeu_ps(crow, c0);
      _mm256_storeu_ps(crow + 8, c1);
    }
  } else {
    alignas(32) float tile[MR * NR];
    for (int r = 0; r < MR; ++r) {
      _mm256_store_ps(tile + r * NR, acc[r][0]);
      _mm256_store_ps(tile + r * NR + 8, acc[r][1]);
    }
    for (int64_t r = 0; r < mr; ++r)
      for (int64_t j = 0; j < nr; ++j) {
        float* dst = c + r * ldc + j;
        *dst = (beta == 0.0f ? 0.0f : *dst * beta) + tile[r * NR + j];
      }
  }
}

void gemm_avx2(const float* a, const float* b, float* c, int64_t m, int64_t n,
               int64_t k, bool trans_a, bool trans_b, float beta) {
  const int64_t lda = trans_a ? m : k;
  const int64_t ldb = trans_b ? k : n;
  // pack_a/pack_b zero-pad their panels, so stale contents are never read.
  thread_local std::vector<float> bpack;
  if (bpack.size() < size_t(KC) * NC) bpack.resize(size_t(KC) * NC);
  thread_local std::vector<float> apack;

  for (int64_t jc = 0; jc < n; jc += NC) {
    const int64_t nc = std::min(NC, n - jc);
    const int64_t nc_padded = (nc + NR - 1) / NR * NR;
    for (int64_t pc = 0; pc < k; pc += KC) {
      const int64_t kc = std::min(KC, k - pc);
      const float* bsrc = trans_b ? b + jc * ldb + pc : b + pc * ldb + jc;
      pack_b(bsrc, bpack.data(), ldb, kc, nc, trans_b);
      const float beta_eff = (pc == 0) ? beta : 1.0f;
      const int64_t mblocks = (m + MC - 1) / MC;
      parallel_for(0, mblocks, [&](int64_t blk0, int64_t blk1) {
        if (apack.size() < size_t(MC) * KC) apack.resize(size_t(MC) * KC);
        for (int64_t blk = blk0; blk < blk1; ++blk) {
          const int64_t ic = blk * MC;
          const int64_t mc = std::min(MC, m - ic);
          const float* asrc = trans_a ? a + pc * lda + ic : a + ic * lda + pc;
          pack_a(asrc, apack.data(), lda, mc, kc, trans_a, m);
          for (int64_t jr = 0; jr < nc_padded; jr += NR) {
            const int64_t nr = std::min(NR, nc - jr);
            for (int64_t ir = 0; ir < mc; ir += MR) {
              const int64_t mr = std::min(MR, mc - ir);
              micro_6x16(apack.data() + ir / MR * (MR * kc) /*panel*/ ,
                         bpack.data() + jr / NR * (NR * kc), kc,
                         c + (ic + ir) * n + jc + jr, n, mr, nr, beta_eff);
            }
          }
        }
      });
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
void add_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}
void mul_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}
void axpy_avx2(float alpha, const float* x, float* y, int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}
void scale_avx2(const float* x, float alpha, float* out, int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = x[i] * alpha;
}
float dot_avx2(const float* a, const float* b, int64_t n) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float s = hsum256(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}
float sum_avx2(const float* x, int64_t n) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum256(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}
void exp_avx2(const float* x, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, exp256(_mm256_loadu_ps(x + i)));
  if (i < n) {
    alignas(32) float buf[8] = {0};
    std::memcpy(buf, x + i, sizeof(float) * (n - i));
    __m256 r = exp256(_mm256_load_ps(buf));
    _mm256_store_ps(buf, r);
    std::memcpy(out + i, buf, sizeof(float) * (n - i));
  }
}

void softmax_rows_avx2(const float* x, float* out, int64_t rows, int64_t cols) {
  parallel_for(0, rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const float* xr = x + r * cols;
      float* yr = out + r * cols;
      __m256 mv = _mm256_set1_ps(-INFINITY);
      int64_t j = 0;
      for (; j + 8 <= cols; j += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(xr + j));
      float mx = -INFINITY;
      {
        alignas(32) float tmp[8];
        _mm256_store_ps(tmp, mv);
        for (int t = 0; t < 8; ++t) mx = std::max(mx, tmp[t]);
      }
      for (; j < cols; ++j) mx = std::max(mx, xr[j]);

      const __m256 mxv = _mm256_set1_ps(mx);
      __m256 acc = _mm256_setzero_ps();
      j = 0;
      for (; j + 8 <= cols; j += 8) {
        __m256 e = exp256(_mm256_sub_ps(_mm256_loadu_ps(xr + j), mxv));
        _mm256_storeu_ps(yr + j, e);
        acc = _mm256_add_ps(acc, e);
      }
      float denom = hsum256(acc);
      for (; j < cols; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        denom += yr[j];
      }
      const float inv = 1.0f / denom;
      const __m256 iv = _mm256_set1_ps(inv);
      j = 0;
      for (; j + 8 <= cols; j += 8)
        _mm256_storeu_ps(yr + j, _mm256_mul_ps(iv, _mm256_loadu_ps(yr + j)));
      for (; j < cols; ++j) yr[j] *= inv;
    }
  });
}

void gelu_avx2(const float* x, float* y, int64_t n) {
  const __m256 inv_sqrt2 = _mm256_set1_ps(0.70710678118654752f);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 phi = _mm256_mul_ps(half, _mm256_add_ps(one, erf256(_mm256_mul_ps(v, inv_sqrt2))));
    _mm256_storeu_ps(y + i, _mm256_mul_ps(v, phi));
  }
  for (; i < n; ++i) {
    const double v = x[i];
    y[i] = float(v * 0.5 * (1.0 + std::erf(v * 0.70710678118654752)));
  }
}

void gelu_grad_avx2(const float* x, const float* gout, float* gx, int64_t n) {
  const __m256 inv_sqrt2 = _mm256_set1_ps(0.70710678118654752f);
  const __m256 inv_sqrt2pi = _mm256_set1_ps(0.39894228040143268f);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 neg_half = _mm256_set1_ps(-0.5f);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 phi = _mm256_mul_ps(half, _mm256_add_ps(one, erf256(_mm256_mul_ps(v, inv_sqrt2))));
    __m256 pdf = _mm256_mul_ps(inv_sqrt2pi, exp256(_mm256_mul_ps(neg_half, _mm256_mul_ps(v, v))));
    __m256 d = _mm256_fmadd_ps(v, pdf, phi);
    _mm256_storeu_ps(gx + i, _mm256_fmadd_ps(_mm256_loadu_ps(gout + i), d, _mm256_loadu_ps(gx + i)));
  }
  for (; i < n; ++i) {
    const double v = x[i];
    const double phi = 0.5 * (1.0 + std::erf(v * 0.70710678118654752));
    const double pdf = 0.39894228040143268 * std::exp(-0.5 * v * v);
    gx[i] += gout[i] * float(phi + v * pdf);
  }
}

}  // namespace

const DispatchF32& f32_avx2() {
  static const DispatchF32 table = {
      gemm_avx2, add_avx2,  mul_avx2,       axpy_avx2, scale_avx2,
      dot_avx2,  sum_avx2,  exp_avx2,       softmax_rows_avx2,
      gelu_avx2, gelu_grad_avx2,
  };
  return table;
}

}  // namespace maskattn::kernels

#else

namespace maskattn::kernels {
const DispatchF32& f32_avx2() {
  static const DispatchF32 table = {};
  return table;
}
}  // namespace maskattn::kernels

#endif
