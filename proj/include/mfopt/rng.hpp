#pragma once

#include <cmath>
#include <cstdint>

namespace mfopt {

// Counter-based splitmix64 generator. All sampling helpers are hand-rolled so
// that streams are bit-identical across platforms and standard library
// versions; std::random distributions are never used.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1) with 53 bits of mantissa
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive on both ends
  int uniform_int(int lo, int hi) {
    return lo + int(next_u64() % uint64_t(int64_t(hi) - int64_t(lo) + 1));
  }

  // Box-Muller, two fresh draws per call (no cached spare, keeps replay simple)
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476 * u2);
  }

 private:
  uint64_t state_;
};

// Derives an independent stream seed; used to give every dataset record,
// optimization step, etc. its own generator so work units can run in any order.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL)));
  r.next_u64();
  return r.next_u64();
}

inline uint64_t fnv1a64(const void* data, size_t n,
                        uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mfopt
