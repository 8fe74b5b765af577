// AVX2+FMA kernel variants.  This translation unit is compiled with
// -mavx2 -mfma; callers reach it only through the dispatch table, which
// checks CPU support at startup.

#include "sosp/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define SOSP_HAVE_AVX2_BUILD 1
#include <immintrin.h>
#endif

namespace sosp::kernels {

#if SOSP_HAVE_AVX2_BUILD

namespace {

constexpr std::size_t VLEN = 4;  // doubles per ymm register

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return hsum(acc) + tail;
}

double dot3_avx2(const double* a, const double* w, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    __m256d aw = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(w + i));
    acc = _mm256_fmadd_pd(aw, _mm256_loadu_pd(b + i), acc);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * w[i] * b[i];
  return hsum(acc) + tail;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    __m256d acc = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    _mm256_storeu_pd(y + i, acc);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, std::size_t n) {
  __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void vadd_avx2(const double* x, const double* y, double* z, std::size_t n) {
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    _mm256_storeu_pd(z + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) z[i] = x[i] + y[i];
}

void relu_avx2(const double* x, double* y, std::size_t n) {
  __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : 0.0;
}

void relu_gate_avx2(const double* pre, const double* g, double* out, std::size_t n) {
  __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) {
    // pre >= 0 matches the scalar gate, including -0.0 >= 0
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(pre + i), zero, _CMP_GE_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
  }
  for (; i < n; ++i) out[i] = pre[i] >= 0.0 ? g[i] : 0.0;
}

double sum_avx2(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + VLEN <= n; i += VLEN) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i];
  return hsum(acc) + tail;
}

const KernelTable kAvx2 = {
    "avx2",     dot_avx2,  dot3_avx2, axpy_avx2,      scale_avx2,
    vadd_avx2,  relu_avx2, relu_gate_avx2, sum_avx2,
};

bool cpu_ok() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

}  // namespace

const KernelTable* avx2_table() { return cpu_ok() ? &kAvx2 : nullptr; }

#else

const KernelTable* avx2_table() { return nullptr; }

#endif  // SOSP_HAVE_AVX2_BUILD

}  // namespace sosp::kernels
