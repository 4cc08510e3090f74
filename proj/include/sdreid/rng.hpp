#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace sdreid {

class Tensor;

/// Named, seedable generator. Distributions are implemented here on top of
/// the raw 64-bit engine so a seed replays identically on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed, std::string name = "root");

  uint64_t seed() const { return seed_; }
  const std::string& name() const { return name_; }

  uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi], unbiased.
  int64_t uniform_int(int64_t lo, int64_t hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream; deterministic in (seed, name, stream).
  Rng fork(std::string_view stream) const;

 private:
  uint64_t seed_;
  std::string name_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t x);
uint64_t hash_string(std::string_view s);

void fill_normal(Tensor& t, Rng& rng, double stddev = 1.0);
/// Normal truncated to +-2 stddev by resampling.
void fill_trunc_normal(Tensor& t, Rng& rng, double stddev);
void fill_uniform(Tensor& t, Rng& rng, double lo, double hi);

}  // namespace sdreid
