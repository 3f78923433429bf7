#include "tttflow/rng.hpp"

namespace tttflow {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (key + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(mix_seed(seed, 0)) {}

Rng Rng::split() { return Rng(mix_seed(engine_(), 1)); }

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream + 2)); }

double Rng::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() { return normal_(engine_); }

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

}  // namespace tttflow
