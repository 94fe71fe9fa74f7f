#include "fedscape/rng.hpp"

#include <cmath>

namespace fedscape {

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  // Rejection-free scaling is fine here: n is always tiny relative to 2^64.
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
}

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1), u1 < 1 always
  return r * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork(std::uint64_t tag) const {
  std::uint64_t s = state_ ^ (tag * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
  return Rng(splitmix64(s));  // decorrelate child from parent state
}

Rng Rng::fork(std::string_view tag) const {
  return fork(fnv1a64(tag.data(), tag.size()));
}

}  // namespace fedscape
