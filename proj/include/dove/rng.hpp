#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dove {

// Counter-based deterministic RNG. Every consumer derives its own stream from
// (seed, tag, counters...), so the "state" that has to be checkpointed for an
// exact resume is just the integers it was derived from. splitmix64 core.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ kGolden) {}

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + kGolden * (b + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  static uint64_t hash_tag(std::string_view tag) {
    // FNV-1a, stable across platforms.
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

  // Stream derivation: rng for one logical purpose at one logical time.
  static Rng derive(uint64_t seed, std::string_view tag) {
    return Rng(mix(seed, hash_tag(tag)));
  }
  static Rng derive(uint64_t seed, std::string_view tag, uint64_t counter) {
    return Rng(mix(mix(seed, hash_tag(tag)), counter));
  }
  static Rng derive(uint64_t seed, std::string_view tag, uint64_t c0, uint64_t c1) {
    return Rng(mix(mix(mix(seed, hash_tag(tag)), c0), c1));
  }

  uint64_t next_u64() {
    state_ += kGolden;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    u1 = u1 > 0.0 ? u1 : 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  static constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dove
