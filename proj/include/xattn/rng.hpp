#pragma once

#include <cstdint>

namespace xattn {

// Counter-based generator: draw k of a stream is splitmix64(seed, k), so a
// (seed, counter) pair fully determines every later draw on any platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void reset(std::uint64_t counter = 0) { counter_ = counter; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in (0, 1); never returns 0.
  double uniform_open();
  // Standard Gumbel(0, 1) sample.
  double gumbel();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);
// Order-sensitive combination of seeds, used to derive per-job streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace xattn
