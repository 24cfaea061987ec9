#include "maskattn/kernels.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

#if defined(__x86_64__) || defined(_M_X64)
#include <cpuid.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace maskattn::kernels {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  unsigned eax, ebx, ecx, edx;
  if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
  const bool avx2 = ebx & (1u << 5);
  if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
  const bool fma = ecx & (1u << 12);
  return avx2 && fma;
#else
  return false;
#endif
}

namespace {

Backend pick_backend() {
  if (const char* env = std::getenv("MASKATTN_BACKEND")) {
    std::string s(env);
    if (s == "scalar") return Backend::scalar;
    if (s == "avx2") {
      if (!cpu_has_avx2() || f32_avx2().gemm == nullptr)
        throw std::runtime_error("MASKATTN_BACKEND=avx2 but AVX2 is unavailable");
      return Backend::avx2;
    }
    throw std::runtime_error("unknown MASKATTN_BACKEND value: " + s);
  }
  return (cpu_has_avx2() && f32_avx2().gemm != nullptr) ? Backend::avx2 : Backend::scalar;
}

Backend g_backend = pick_backend();

// Large activation/grad buffers are allocated and freed every step; keeping
// them on the heap (instead of per-allocation mmap) lets glibc reuse them.
#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

Backend active_backend() { return g_backend; }
void force_backend(Backend b) {
  if (b == Backend::avx2 && f32_avx2().gemm == nullptr)
    throw std::runtime_error("AVX2 backend unavailable on this CPU");
  g_backend = b;
}
std::string backend_name() { return g_backend == Backend::avx2 ? "avx2" : "scalar"; }

const DispatchF32& f32() {
  return g_backend == Backend::avx2 ? f32_avx2() : f32_scalar();
}

// ---------------------------------------------------------------------------
// Persistent worker pool. Tasks are static range partitions so results do not
// depend on scheduling; nested calls run inline on the caller.
// ---------------------------------------------------------------------------
namespace {

int configured_threads() {
  if (const char* env = std::getenv("MASKATTN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

class Pool {
 public:
  Pool() : nthreads_(configured_threads()) {
    for (int i = 1; i < nthreads_; ++i)
      workers_.emplace_back([this, i] { worker_loop(i); });
  }
  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  int size() const { return nthreads_; }

  void run(int64_t begin, int64_t end, void (*fn)(int64_t, int64_t, void*), void* ctx) {
    const int64_t n = end - begin;
    if (n <= 0) return;
    const int parts = int(std::min<int64_t>(nthreads_, n));
    if (parts == 1 || in_task_) {  // nested calls run inline
      fn(begin, end, ctx);
      return;
    }
    std::lock_guard<std::mutex> dispatch_lk(dispatch_m_);
    {
      std::lock_guard<std::mutex> lk(m_);
      fn_ = fn;
      ctx_ = ctx;
      begin_ = begin;
      end_ = end;
      parts_ = parts;
      pending_ = parts - 1;
      ++epoch_;
    }
    cv_.notify_all();
    run_part(0);
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
  }

 private:
  void run_part(int part) {
    const int64_t n = end_ - begin_;
    const int64_t chunk = (n + parts_ - 1) / parts_;
    const int64_t b = begin_ + chunk * part;
    const int64_t e = std::min(end_, b + chunk);
    in_task_ = true;
    if (b < e) fn_(b, e, ctx_);
    in_task_ = false;
  }

  void worker_loop(int idx) {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(m_);
      cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
      if (stop_) return;
      seen = epoch_;
      const int part = idx;
      const bool mine = part < parts_;
      lk.unlock();
      if (mine) run_part(part);
      lk.lock();
      if (mine && --pending_ == 0) done_cv_.notify_one();
    }
  }

  const int nthreads_;
  std::vector<std::thread> workers_;
  std::mutex m_, dispatch_m_;
  std::condition_variable cv_, done_cv_;
  bool stop_ = false;
  uint64_t epoch_ = 0;
  int parts_ = 0;
  int pending_ = 0;
  int64_t begin_ = 0, end_ = 0;
  void (*fn_)(int64_t, int64_t, void*) = nullptr;
  void* ctx_ = nullptr;
  static thread_local bool in_task_;
};

thread_local bool Pool::in_task_ = false;

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

int worker_threads() { return pool().size(); }

void parallel_for(int64_t begin, int64_t end, void (*fn)(int64_t, int64_t, void*), void* ctx) {
  pool().run(begin, end, fn, ctx);
}

}  // namespace maskattn::kernels
