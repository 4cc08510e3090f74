#include "sdreid/rng.hpp"

#include <cmath>
#include <numbers>

#include "sdreid/errors.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t hash_string(std::string_view s) {
  // FNV-1a
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(uint64_t seed, std::string name) : seed_(seed), name_(std::move(name)), engine_(splitmix64(seed)) {}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (hi < lo) throw ContractError("uniform_int: empty range");
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<int64_t>(engine_());
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
  uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return lo + static_cast<int64_t>(r % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

Rng Rng::fork(std::string_view stream) const {
  const uint64_t child = splitmix64(seed_ ^ splitmix64(hash_string(name_)) ^ hash_string(stream));
  return Rng(child, name_ + "/" + std::string(stream));
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (auto& v : t.span()) v = stddev * rng.normal();
}

void fill_trunc_normal(Tensor& t, Rng& rng, double stddev) {
  for (auto& v : t.span()) {
    double x;
    do {
      x = rng.normal();
    } while (std::abs(x) > 2.0);
    v = stddev * x;
  }
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.span()) v = rng.uniform(lo, hi);
}

}  // namespace sdreid
