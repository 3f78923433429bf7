#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace tttflow {

// SplitMix64 finalizer; used to derive independent seeds from (seed, key).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) noexcept;

// Seeded generator threaded explicitly through every stochastic op; there is
// no global random state. Child streams come from split()/fork().
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed);

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  std::uint64_t seed() const noexcept { return seed_; }

  // Independent child stream; advances this generator by one draw.
  Rng split();
  // Child stream keyed by `stream`; does not touch this generator's state.
  Rng fork(std::uint64_t stream) const;

  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // N(0, 1)
  std::size_t index(std::size_t n);      // uniform in [0, n)

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace tttflow
