#pragma once

#include <cmath>
#include <cstdint>

namespace mcl3d {

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based generator with explicit distributions so that streams are
// bit-stable across platforms and serializable as a single word.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  // Derives an independent stream, e.g. per subject or per worker.
  Rng fork(uint64_t stream_id) const {
    uint64_t s = state_ ^ (0x517cc1b727220a95ULL * (stream_id + 1));
    splitmix64(s);
    return Rng(s);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  // Box-Muller; one value per call keeps the stream layout simple.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
};

}  // namespace mcl3d
