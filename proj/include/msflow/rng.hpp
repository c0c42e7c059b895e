#pragma once

#include <cstdint>
#include <string_view>

namespace msf {

// Deterministic splittable RNG (splitmix64 core). Every consumer derives a
// named substream from the run seed, so the values a component draws do not
// depend on scheduling or on what other components drew before it. All
// conversions are hand rolled; nothing here depends on implementation
// defined std::distribution behavior.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent child stream. Same (seed, name) always yields the same
  // stream; different names yield unrelated ones.
  Rng stream(std::string_view name) const;
  Rng stream(std::uint64_t index) const;

  std::uint64_t next_u64();

  double uniform();                       // [0, 1), 53-bit
  double uniform(double lo, double hi);   // [lo, hi)
  int uniform_int(int lo, int hi);        // inclusive both ends
  double normal();                        // standard normal, Box-Muller
  double normal(double mean, double stddev);

 private:
  std::uint64_t state_;
};

}  // namespace msf
