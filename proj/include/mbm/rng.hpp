#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace mbm {

// splitmix64 finalizer; used both as a bit mixer and to derive child seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over a byte string; stable across platforms and runs.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// One global seed fans out to named substreams so that pipeline stages
// (generation, sampling, bootstrap, CV) are independently reproducible.
// Children are derived by hashing (seed, name, index); collisions between
// distinct names are as unlikely as 64-bit hash collisions.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t derive(std::string_view name, std::uint64_t index = 0) const {
    return mix64(fnv1a(name, mix64(seed_)) ^ mix64(index + 0x51ed2701));
  }

  SeedSequence child(std::string_view name, std::uint64_t index = 0) const {
    return SeedSequence(derive(name, index));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

// Thin wrapper over mt19937_64 with the distributions used throughout.
// Kept as one type so all stochastic code paths share a single engine
// and draws are reproducible from a 64-bit seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double uniform() { return unif_(engine_); }

  double normal() { return normal_(engine_); }

  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  bool bernoulli(double p) { return unif_(engine_) < p; }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace mbm
