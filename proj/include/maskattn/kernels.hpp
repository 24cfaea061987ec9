#pragma once

// Data-parallel inner loops behind the tensor ops. Every kernel exists as a
// scalar reference implementation and (on x86-64 with AVX2+FMA) a vectorized
// variant. The active backend is picked once at startup from cpuid and can be
// overridden with MASKATTN_BACKEND=scalar|avx2 for equivalence testing.

#include <cstdint>
#include <string>

namespace maskattn::kernels {

enum class Backend { scalar, avx2 };

struct DispatchF32 {
  // Row-major C[M,N] = op(A)*op(B) + beta*C. op(A) is A[M,K] or, when
  // trans_a, A is stored [K,M]. Likewise B is [K,N] or [N,K] when trans_b.
  void (*gemm)(const float* a, const float* b, float* c, int64_t m, int64_t n,
               int64_t k, bool trans_a, bool trans_b, float beta);
  void (*add)(const float* a, const float* b, float* out, int64_t n);
  void (*mul)(const float* a, const float* b, float* out, int64_t n);
  void (*axpy)(float alpha, const float* x, float* y, int64_t n);  // y += a*x
  void (*scale)(const float* x, float alpha, float* out, int64_t n);
  float (*dot)(const float* a, const float* b, int64_t n);
  float (*sum)(const float* x, int64_t n);
  void (*vexp)(const float* x, float* out, int64_t n);
  // Stable softmax over each row of a [rows, cols] matrix.
  void (*softmax_rows)(const float* x, float* out, int64_t rows, int64_t cols);
  // y = x * Phi(x) with Phi the standard normal CDF (exact-erf GELU).
  void (*gelu)(const float* x, float* y, int64_t n);
  // gx += gout * gelu'(x)
  void (*gelu_grad)(const float* x, const float* gout, float* gx, int64_t n);
};

const DispatchF32& f32();
Backend active_backend();
void force_backend(Backend b);  // tests only
bool cpu_has_avx2();
std::string backend_name();

// Reference and vector tables, exposed so equivalence tests can compare them
// directly regardless of the active backend.
const DispatchF32& f32_scalar();
const DispatchF32& f32_avx2();  // null pointers when unsupported

// f64 path: used by gradient checks, small problems only; scalar throughout.
void dgemm(const double* a, const double* b, double* c, int64_t m, int64_t n,
           int64_t k, bool trans_a, bool trans_b, double beta);

// Worker threads for row-parallel kernels; MASKATTN_THREADS caps it.
int worker_threads();
void parallel_for(int64_t begin, int64_t end, void (*fn)(int64_t, int64_t, void*), void* ctx);

template <class F>
void parallel_for(int64_t begin, int64_t end, F&& f) {
  auto thunk = [](int64_t b, int64_t e, void* ctx) { (*static_cast<F*>(ctx))(b, e); };
  parallel_for(begin, end, thunk, &f);
}

}  // namespace maskattn::kernels
