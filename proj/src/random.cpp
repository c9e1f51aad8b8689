#include "nlpverify/random.hpp"

#include "nlpverify/error.hpp"

namespace nlv {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NoEligibleWord: return "NoEligibleWord";
    case ErrorKind::NoEligibleTarget: return "NoEligibleTarget";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::UnknownLabel: return "UnknownLabel";
    case ErrorKind::DegenerateSplit: return "DegenerateSplit";
    case ErrorKind::EmbedderFailure: return "EmbedderFailure";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::KTooLarge: return "KTooLarge";
    case ErrorKind::AllPositivesEvicted: return "AllPositivesEvicted";
    case ErrorKind::RegionMismatch: return "RegionMismatch";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::EmptySet: return "EmptySet";
    case ErrorKind::MissingUpstream: return "MissingUpstream";
  }
  return "Unknown";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return derive_seed(seed, hash_bytes(label, 0));
}

std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ splitmix64(seed);
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "Rng::index with n = 0");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

}  // namespace nlv
