#pragma once

#include <cmath>
#include <cstdint>

namespace vmp {

// Counter-based pseudo-random generator (splitmix64 over a seed/counter
// pair). Every draw is a pure function of (seed, counter), so streams can
// be split deterministically and replayed bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (counter + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Derive an independent child stream, e.g. per sample or per shard.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_, 0xD1B54A32D192ED03ULL ^ stream));
  }

  std::uint64_t next_u64() { return mix(seed_, counter_++); }

  // Uniform in (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare is cached so the stream is
  // still a deterministic function of the draw count.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vmp
