#pragma once

#include "tttflow/simd/kernels.hpp"

namespace tttflow::simd::detail {

#if defined(TTTFLOW_HAVE_AVX2_KERNELS)
const KernelTable& avx2_table();
#endif
#if defined(TTTFLOW_HAVE_NEON_KERNELS)
const KernelTable& neon_table();
#endif

}  // namespace tttflow::simd::detail
