#include <atomic>
#include <stdexcept>
#include <string>

#include "kernels_internal.hpp"

namespace tttflow::simd {

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "neon") return Isa::neon;
  throw std::invalid_argument("unknown ISA '" + std::string(name) + "'");
}

const KernelTable* avx2_kernels() {
#if defined(TTTFLOW_HAVE_AVX2_KERNELS)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &detail::avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable* neon_kernels() {
#if defined(TTTFLOW_HAVE_NEON_KERNELS)
  return &detail::neon_table();
#else
  return nullptr;
#endif
}

Isa detect_isa() {
  if (avx2_kernels() != nullptr) return Isa::avx2;
  if (neon_kernels() != nullptr) return Isa::neon;
  return Isa::scalar;
}

std::vector<Isa> available_isas() {
  std::vector<Isa> out{Isa::scalar};
  if (avx2_kernels() != nullptr) out.push_back(Isa::avx2);
  if (neon_kernels() != nullptr) out.push_back(Isa::neon);
  return out;
}

namespace {

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &scalar_kernels();
    case Isa::avx2:
      return avx2_kernels();
    case Isa::neon:
      return neon_kernels();
  }
  return nullptr;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{table_for(detect_isa())};
  return slot;
}

}  // namespace

const KernelTable& active() { return *active_slot().load(std::memory_order_acquire); }

Isa active_isa() { return active().isa; }

void select_isa(Isa isa) {
  const KernelTable* table = table_for(isa);
  if (table == nullptr) {
    throw std::invalid_argument("ISA '" + std::string(isa_name(isa)) +
                                "' is not available on this build/CPU");
  }
  active_slot().store(table, std::memory_order_release);
}

}  // namespace tttflow::simd
