#pragma once

#include <cstdint>

namespace pstconv {

/// splitmix64 step; statistically solid and tiny, used both as the stream
/// generator and for deriving independent sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (tag + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  return splitmix64(s);
}

/// Deterministic RNG with explicit, implementation-defined-free distributions
/// so identical seeds give identical artifacts on any build of this code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Unbiased uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t min = (0ULL - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= min) return r % n;
    }
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

 private:
  std::uint64_t state_;
};

/// Sampling policy shared by every randomized geometric operation.
/// Deterministic mode is a pure function of the inputs; seeded mode derives
/// per-call-site streams via fork() so results do not depend on evaluation
/// order.
struct Sampling {
  enum class Mode { Deterministic, Seeded };

  Mode mode = Mode::Deterministic;
  std::uint64_t seed = 0;

  static Sampling deterministic() { return {}; }
  static Sampling seeded(std::uint64_t seed) { return {Mode::Seeded, seed}; }

  bool is_seeded() const { return mode == Mode::Seeded; }

  Sampling fork(std::uint64_t tag) const {
    if (!is_seeded()) return *this;
    return seeded(hash_combine(seed, tag));
  }
  Sampling fork(std::uint64_t a, std::uint64_t b) const { return fork(hash_combine(a, b)); }
  Sampling fork(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return fork(hash_combine(hash_combine(a, b), c));
  }
};

}  // namespace pstconv
