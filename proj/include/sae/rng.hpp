#pragma once

#include <cstdint>
#include <vector>

namespace sae {

// Deterministic splittable PRNG. xoshiro256++ core seeded through splitmix64
// from (seed, stream_id); the same pair always reproduces the same draw
// sequence, and child() derives statistically independent sub-streams.
// All transforms are implemented here (not std::<distribution>) so sequences
// are identical across platforms and compilers.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

  // Independent sub-stream k of this stream (pure function of seed/stream/k).
  RngStream child(std::uint64_t k) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64();

  double uniform();  // strictly inside (0, 1)
  double uniform(double a, double b);
  double normal(double mean, double var);  // var == 0 returns mean exactly
  double gamma(double shape, double rate);
  double inverse_gamma(double shape, double rate);
  // Density proportional to t^{-shape-1} exp(-rate/t) on (lower, upper).
  // shape may be <= 0 and rate may be 0 whenever the truncated density is
  // integrable; draws lie strictly inside the interval.
  double trunc_inverse_gamma(double shape, double rate, double lower, double upper);
  double beta(double a, double b);
  double student_t(double dof);
  int bernoulli(double p);

  // k distinct indices from {0,...,n-1}, ascending.
  std::vector<int> sample_without_replacement(int n, int k);

 private:
  std::uint64_t s_[4];
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sae
