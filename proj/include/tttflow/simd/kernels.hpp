#pragma once

// Dense float64 kernels behind the tensor engine. Every kernel has a scalar
// reference implementation; vectorized variants (AVX2+FMA on x86-64, NEON on
// aarch64) are selected at runtime and must agree with the reference to
// rounding (FMA contraction and reduction order are the only differences).

#include <cstddef>
#include <string_view>
#include <vector>

namespace tttflow::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);
Isa parse_isa(std::string_view name);  // throws std::invalid_argument

struct KernelTable {
  Isa isa;
  // C[m x n] += A[m x k] * B[k x n], all row-major.
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  // C[m x n] += A^T * B with A stored [k x m], B stored [k x n].
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  // C[m x n] += A * B^T with A stored [m x k], B stored [n x k].
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
};

const KernelTable& scalar_kernels();
// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

// Best ISA supported by this binary on this CPU.
Isa detect_isa();
std::vector<Isa> available_isas();

// Kernels used by the tensor engine. Defaults to detect_isa().
const KernelTable& active();
Isa active_isa();
// Switches the process-wide kernel table. Not safe while other threads are
// running tensor code. Throws std::invalid_argument for an unavailable ISA.
void select_isa(Isa isa);

}  // namespace tttflow::simd
