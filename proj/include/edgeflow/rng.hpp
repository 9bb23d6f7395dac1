#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace edgeflow {

// Deterministic 64-bit mixing. All seeded behavior in the project derives
// from these instead of distribution classes, whose output is
// implementation-defined and would break frozen expected values.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a, widened through splitmix
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  uint64_t st = h;
  return splitmix64(st);
}

// Small seeded generator for handler decisions and load-driver draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() { return splitmix64(state_); }

  // Uniform in [0, n) without modulo bias worth caring about at our n.
  uint64_t bounded(uint64_t n) { return n == 0 ? 0 : next() % n; }

  // Uniform in [0, 1).
  double uniform() { return (next() >> 11) * (1.0 / 9007199254740992.0); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
};

// 8-4-4-4-12 hex string built from two mixed words; stable across modes.
std::string uuid_from(uint64_t a, uint64_t b);

}  // namespace edgeflow
