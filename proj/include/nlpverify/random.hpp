#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nlv {

std::uint64_t splitmix64(std::uint64_t x);

// Sub-stream seed for (seed, index); streams for different indices are
// independent of processing order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// FNV-1a over bytes, finalized with splitmix64.
std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed);

// Seeded stream with distribution helpers whose output does not depend on
// the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);

  // Uniform real in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace nlv
