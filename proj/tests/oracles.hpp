#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance suite. Deliberately naive.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sdreid/retrieval.hpp"
#include "sdreid/tensor.hpp"

namespace oracle {

struct QueryScore {
  double ap = 0, inp = 0;
  int64_t first = 0;
  bool valid = false;
};

// Rank every non-junk gallery entry by counting what beats it (ties broken
// by gallery index).
inline QueryScore retrieval_query(const sdreid::Tensor& dist, int64_t qi, const sdreid::eval::RankingLabels& q,
                                  const sdreid::eval::RankingLabels& g) {
  const auto n = static_cast<int64_t>(g.identity.size());
  const auto qid = q.identity[static_cast<size_t>(qi)], qcam = q.camera[static_cast<size_t>(qi)];
  auto junk = [&](int64_t j) {
    return g.identity[static_cast<size_t>(j)] == qid && g.camera[static_cast<size_t>(j)] == qcam;
  };
  std::vector<int64_t> pos_ranks;
  for (int64_t j = 0; j < n; ++j) {
    if (junk(j) || g.identity[static_cast<size_t>(j)] != qid) continue;
    int64_t rank = 1;
    for (int64_t o = 0; o < n; ++o) {
      if (o == j || junk(o)) continue;
      const double a = dist.at(qi, o), b = dist.at(qi, j);
      if (a < b || (a == b && o < j)) ++rank;
    }
    pos_ranks.push_back(rank);
  }
  QueryScore r;
  if (pos_ranks.empty()) return r;
  std::sort(pos_ranks.begin(), pos_ranks.end());
  r.valid = true;
  for (size_t i = 0; i < pos_ranks.size(); ++i) r.ap += static_cast<double>(i + 1) / static_cast<double>(pos_ranks[i]);
  r.ap /= static_cast<double>(pos_ranks.size());
  r.inp = static_cast<double>(pos_ranks.size()) / static_cast<double>(pos_ranks.back());
  r.first = pos_ranks.front();
  return r;
}

struct RetrievalSummary {
  double map = 0, minp = 0, r1 = 0, r5 = 0, r10 = 0;
  int64_t valid = 0;
};

inline RetrievalSummary retrieval(const sdreid::Tensor& dist, const sdreid::eval::RankingLabels& q,
                                  const sdreid::eval::RankingLabels& g) {
  RetrievalSummary s;
  for (int64_t i = 0; i < dist.dim(0); ++i) {
    const auto o = retrieval_query(dist, i, q, g);
    if (!o.valid) continue;
    ++s.valid;
    s.map += o.ap;
    s.minp += o.inp;
    s.r1 += o.first <= 1;
    s.r5 += o.first <= 5;
    s.r10 += o.first <= 10;
  }
  if (s.valid > 0) {
    const auto n = static_cast<double>(s.valid);
    s.map /= n;
    s.minp /= n;
    s.r1 /= n;
    s.r5 /= n;
    s.r10 /= n;
  }
  return s;
}

// CDF of t' = (1 - (u/T)^3) T with u ~ U[1, T], for real x.
inline double cubic_timestep_cdf(double x, double T) {
  if (x <= 0) return 0.0;
  if (x >= T) return 1.0;
  const double r = std::max(std::cbrt(1.0 - x / T), 1.0 / T);
  return std::clamp((1.0 - r) / (1.0 - 1.0 / T), 0.0, 1.0);
}

// Probability that the rounded, clamped cubic timestep lands in [lo, hi].
inline double cubic_timestep_mass(int64_t lo, int64_t hi, int64_t T) {
  const double a = lo <= 1 ? -1.0 : static_cast<double>(lo) - 0.5;
  const double b = hi >= T ? 2.0 * static_cast<double>(T) : static_cast<double>(hi) + 0.5;
  return cubic_timestep_cdf(b, static_cast<double>(T)) - cubic_timestep_cdf(a, static_cast<double>(T));
}

}  // namespace oracle
