#pragma once

#include <cstdint>
#include <initializer_list>

namespace demosynth {

// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based hash: the value depends only on the key tuple, never on call
// order, so parallel schedules draw the same numbers as sequential ones.
constexpr std::uint64_t counter_hash(std::initializer_list<std::uint64_t> key) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t k : key) h = mix64(h ^ mix64(k));
  return h;
}

// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, n) by rejection on the top bits.
inline std::uint64_t bounded(std::uint64_t x, std::uint64_t n,
                             std::uint64_t reroll_key = 0) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  while (x >= limit) x = mix64(x ^ reroll_key ^ 0xa0761d6478bd642fULL);
  return x % n;
}

// Sequential stream over a counter; portable across platforms (the standard
// distributions are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next() { return counter_hash({seed_, counter_++}); }
  double uniform() { return to_unit(next()); }
  std::uint64_t below(std::uint64_t n) { return bounded(next(), n, seed_); }
  // Inclusive range.
  int range(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace demosynth
