// Compiled with -mavx2 -mfma. Only reached through dispatch after a CPUID check.

#include <immintrin.h>

#include "kernels_internal.hpp"

namespace tttflow::simd {
namespace {

// crow[0..n) += alpha * brow[0..n)
inline void row_fma(double alpha, const double* brow, double* crow, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    __m256d c1 = _mm256_loadu_pd(crow + j + 4);
    c0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(brow + j), c0);
    c1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(brow + j + 4), c1);
    _mm256_storeu_pd(crow + j, c0);
    _mm256_storeu_pd(crow + j + 4, c1);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    c0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(brow + j), c0);
    _mm256_storeu_pd(crow + j, c0);
  }
  for (; j < n; ++j) crow[j] += alpha * brow[j];
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// c[0..n) += sum_p a[p * as] * b[p * n + 0..n). A strip of up to 16 columns of
// c stays in registers for the whole k loop.
inline void row_accumulate(const double* a, std::size_t as, const double* b, double* c,
                           std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256d c0 = _mm256_loadu_pd(c + j);
    __m256d c1 = _mm256_loadu_pd(c + j + 4);
    __m256d c2 = _mm256_loadu_pd(c + j + 8);
    __m256d c3 = _mm256_loadu_pd(c + j + 12);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d va = _mm256_set1_pd(a[p * as]);
      const double* br = b + p * n + j;
      c0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(br), c0);
      c1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(br + 4), c1);
      c2 = _mm256_fmadd_pd(va, _mm256_loadu_pd(br + 8), c2);
      c3 = _mm256_fmadd_pd(va, _mm256_loadu_pd(br + 12), c3);
    }
    _mm256_storeu_pd(c + j, c0);
    _mm256_storeu_pd(c + j + 4, c1);
    _mm256_storeu_pd(c + j + 8, c2);
    _mm256_storeu_pd(c + j + 12, c3);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d c0 = _mm256_loadu_pd(c + j);
    for (std::size_t p = 0; p < k; ++p) {
      c0 = _mm256_fmadd_pd(_mm256_set1_pd(a[p * as]), _mm256_loadu_pd(b + p * n + j), c0);
    }
    _mm256_storeu_pd(c + j, c0);
  }
  for (; j < n; ++j) {
    double s = c[j];
    for (std::size_t p = 0; p < k; ++p) s += a[p * as] * b[p * n + j];
    c[j] = s;
  }
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) row_accumulate(a + i * k, 1, b, c + i * n, k, n);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) row_accumulate(a + i, m, b, c + i * n, k, n);
}

// Four dot products per pass so each load of the A row is reused.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd();
      __m256d s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd();
      __m256d s3 = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const __m256d va = _mm256_loadu_pd(arow + p);
        s0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b3 + p), s3);
      }
      double t0 = hsum(s0), t1 = hsum(s1), t2 = hsum(s2), t3 = hsum(s3);
      for (; p < k; ++p) {
        t0 += arow[p] * b0[p];
        t1 += arow[p] * b1[p];
        t2 += arow[p] * b2[p];
        t3 += arow[p] * b3[p];
      }
      crow[j] += t0;
      crow[j + 1] += t1;
      crow[j + 2] += t2;
      crow[j + 3] += t3;
    }
    for (; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
  }
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) { row_fma(alpha, x, y, n); }

constexpr KernelTable kAvx2{Isa::avx2, gemm_nn, gemm_tn, gemm_nt, add, mul, axpy, dot};

}  // namespace

namespace detail {
const KernelTable& avx2_table() { return kAvx2; }
}  // namespace detail

}  // namespace tttflow::simd
