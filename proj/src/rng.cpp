#include "msflow/rng.hpp"

#include <cmath>

#include "msflow/common.hpp"

namespace msf {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(mix64(seed + 0x9e3779b97f4a7c15ULL)) {}

Rng Rng::stream(std::string_view name) const {
  return Rng(state_ ^ mix64(fnv1a(name)));
}

Rng Rng::stream(std::uint64_t index) const {
  return Rng(state_ ^ mix64(index + 0x632be59bd9b4e019ULL));
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  return mix64(state_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  MSF_CHECK(lo <= hi, "Rng::uniform: lo (" << lo << ") > hi (" << hi << ")");
  return lo + (hi - lo) * uniform();
}

int Rng::uniform_int(int lo, int hi) {
  MSF_CHECK(lo <= hi, "Rng::uniform_int: lo (" << lo << ") > hi (" << hi << ")");
  const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  // Modulo bias is < 2^-40 for the spans used here; acceptable and stable.
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  // Box-Muller, cosine branch only so one call consumes exactly two draws.
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

}  // namespace msf
