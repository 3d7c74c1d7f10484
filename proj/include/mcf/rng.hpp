#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mcf {

/// SplitMix64 finalizer. Used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seed of child stream `stream` under `parent`:
///   splitmix64(splitmix64(parent) ^ splitmix64(stream + 1)).
/// Streams depend only on (parent, stream), never on call order, so work
/// scheduled on any number of threads sees the same random numbers.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
  return splitmix64(splitmix64(parent) ^ splitmix64(stream + 1));
}

/// Seeded 64-bit Mersenne Twister with a reproducible split function.
class SeededRng {
 public:
  using result_type = std::mt19937_64::result_type;

  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  /// Independent child stream; does not advance this generator.
  SeededRng split(std::uint64_t stream) const { return SeededRng(derive_seed(seed_, stream)); }

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  int poisson(double rate) {
    if (rate <= 0.0) return 0;
    return std::poisson_distribution<int>(rate)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  /// `k` distinct values from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  /// Random permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n) { return sample_without_replacement(n, n); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace mcf
