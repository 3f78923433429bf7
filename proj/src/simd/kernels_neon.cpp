// aarch64 only. Advanced SIMD is mandatory there, so no runtime probe is needed.

#include <arm_neon.h>

#include "kernels_internal.hpp"

namespace tttflow::simd {
namespace {

inline void row_fma(double alpha, const double* brow, double* crow, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    float64x2_t c0 = vld1q_f64(crow + j);
    float64x2_t c1 = vld1q_f64(crow + j + 2);
    c0 = vfmaq_f64(c0, va, vld1q_f64(brow + j));
    c1 = vfmaq_f64(c1, va, vld1q_f64(brow + j + 2));
    vst1q_f64(crow + j, c0);
    vst1q_f64(crow + j + 2, c1);
  }
  for (; j < n; ++j) crow[j] += alpha * brow[j];
}

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) row_fma(a[i * k + p], b + p * n, c + i * n, n);
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) row_fma(a[p * m + i], b + p * n, c + i * n, n);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
  }
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) { row_fma(alpha, x, y, n); }

constexpr KernelTable kNeon{Isa::neon, gemm_nn, gemm_tn, gemm_nt, add, mul, axpy, dot};

}  // namespace

namespace detail {
const KernelTable& neon_table() { return kNeon; }
}  // namespace detail

}  // namespace tttflow::simd
