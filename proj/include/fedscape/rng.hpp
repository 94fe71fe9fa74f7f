#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fedscape {

// FNV-1a 64-bit hash, used for stream derivation and payload checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 0xcbf29ce484222325ull);

// Deterministic splittable RNG (splitmix64 core).
//
// Streams are derived by hashing a seed with integer or string tags, so any
// (seed, tag, ...) coordinate yields the same sequence no matter what other
// streams were consumed or on which worker thread the draw happens. All
// distributions are implemented here rather than via <random> so sequences
// are stable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller. Consumes two draws per call; no spare is
  // cached so the stream position is a pure function of the call count.
  double normal();

  // Child stream derived from the current state and a tag. Forking does not
  // advance this stream.
  Rng fork(std::uint64_t tag) const;
  Rng fork(std::string_view tag) const;

  // Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace fedscape
