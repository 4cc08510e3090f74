#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "sdreid/errors.hpp"
#include "sdreid/retrieval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace sdreid;
using namespace sdreid::eval;
using data::View;

namespace {

FeatureRecord record(std::vector<double> real, int64_t id, View v, int64_t cam) {
  FeatureRecord r;
  r.real = std::move(real);
  r.identity = id;
  r.view = v;
  r.camera_id = cam;
  return r;
}

}  // namespace

TEST_CASE("hand-worked single query") {
  Tensor d({1, 5});
  const double vals[] = {0.1, 0.2, 0.3, 0.4, 0.5};
  for (int j = 0; j < 5; ++j) d.at(0, j) = vals[j];
  const RankingLabels q{{7}, {0}};
  const RankingLabels g{{1, 7, 2, 3, 4}, {1, 1, 1, 1, 1}};
  const auto r = cmc_map_minp(d, q, g, 5);
  CHECK(r.rank_k.at(1) == 0.0);
  CHECK(r.rank_k.at(5) == 1.0);
  CHECK(r.map_score == doctest::Approx(0.5));
  CHECK(r.minp == doctest::Approx(0.5));
  CHECK(r.cmc == std::vector<double>{0, 1, 1, 1, 1});
}

TEST_CASE("positives ranked first score perfectly") {
  Tensor d({1, 4});
  for (int j = 0; j < 4; ++j) d.at(0, j) = j;
  const auto r = cmc_map_minp(d, {{3}, {0}}, {{3, 3, 1, 2}, {1, 2, 1, 1}}, 4);
  CHECK(r.rank_k.at(1) == 1.0);
  CHECK(r.map_score == 1.0);
  CHECK(r.minp == 1.0);
}

TEST_CASE("metrics agree with the brute-force oracle on random instances") {
  Rng rng(50);
  for (int inst = 0; inst < 100; ++inst) {
    const auto m = rng.uniform_int(1, 50), n = rng.uniform_int(1, 200);
    const auto ids = rng.uniform_int(1, 12);
    RankingLabels q, g;
    for (int64_t i = 0; i < m; ++i) {
      q.identity.push_back(rng.uniform_int(0, ids - 1));
      q.camera.push_back(rng.uniform_int(0, 2));
    }
    for (int64_t j = 0; j < n; ++j) {
      g.identity.push_back(rng.uniform_int(0, ids - 1));
      g.camera.push_back(rng.uniform_int(0, 2));
    }
    // Coarse quantization forces ties.
    Tensor d({m, n});
    for (auto& v : d.span()) v = std::floor(rng.uniform() * 20.0) / 20.0;
    const auto rep = cmc_map_minp(d, q, g, 50);

    const auto o = oracle::retrieval(d, q, g);
    const int64_t valid = o.valid;
    CHECK(rep.num_queries == valid);
    CHECK(rep.excluded == m - valid);
    if (valid == 0) continue;
    CHECK(std::abs(rep.map_score - o.map) < 1e-10);
    CHECK(std::abs(rep.minp - o.minp) < 1e-10);
    CHECK(std::abs(rep.rank_k.at(1) - o.r1) < 1e-10);
    CHECK(std::abs(rep.rank_k.at(5) - o.r5) < 1e-10);
    CHECK(std::abs(rep.rank_k.at(10) - o.r10) < 1e-10);
    CHECK(rep.map_score <= 1.0);
    CHECK(rep.minp <= 1.0);
    for (size_t k = 1; k < rep.cmc.size(); ++k) CHECK(rep.cmc[k] >= rep.cmc[k - 1]);
  }
}

TEST_CASE("junk duplicates of the query do not change the score") {
  Tensor d({1, 3});
  d.at(0, 0) = 0.5;
  d.at(0, 1) = 0.2;
  d.at(0, 2) = 0.9;
  const auto base = cmc_map_minp(d, {{1}, {0}}, {{1, 2, 3}, {5, 5, 5}}, 3);
  Tensor d2({1, 4});
  d2.at(0, 0) = 0.5;
  d2.at(0, 1) = 0.2;
  d2.at(0, 2) = 0.9;
  d2.at(0, 3) = 0.0;
  const auto with_junk = cmc_map_minp(d2, {{1}, {0}}, {{1, 2, 3, 1}, {5, 5, 5, 0}}, 3);
  CHECK(with_junk.map_score == base.map_score);
  CHECK(with_junk.cmc == base.cmc);
}

TEST_CASE("distance matrix") {
  Rng rng(51);
  const Tensor x = testutil::randn({4, 3}, rng);
  const Tensor self = distance_matrix(x, x);
  for (int64_t i = 0; i < 4; ++i) CHECK(std::abs(self.at(i, i)) < 1e-6);
  Tensor e({2, 2}, 0.0);
  e.at(0, 0) = 1;
  e.at(1, 1) = 1;
  CHECK(distance_matrix(e, e).at(0, 1) == doctest::Approx(std::sqrt(2.0)));
  const Tensor y = testutil::randn({5, 3}, rng);
  const Tensor d = distance_matrix(x, y);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double s = 0;
      for (int64_t k = 0; k < 3; ++k) s += (x.at(i, k) - y.at(j, k)) * (x.at(i, k) - y.at(j, k));
      CHECK(std::abs(d.at(i, j) - std::sqrt(s)) < 1e-12);
    }
}

TEST_CASE("fusion normalizes and concatenates parts") {
  FeatureRecord r = record({3, 4}, 0, View::Aerial, 0);
  CHECK_THROWS_AS(fuse(r, FusionMode::GenA), ContractError);
  r.gen_aerial = std::vector<double>{0, 2};
  r.gen_ground = std::vector<double>{5, 0};
  const auto real = fuse(r, FusionMode::Real);
  CHECK(real[0] == doctest::Approx(0.6));
  CHECK(real[1] == doctest::Approx(0.8));
  CHECK(fuse(r, FusionMode::GenAG) == std::vector<double>{0, 1, 1, 0});
  const auto all = fuse(r, FusionMode::RealPlusGenAG);
  CHECK(all.size() == 6);
  CHECK(all[0] == doctest::Approx(0.6));
  CHECK(all[5] == 0.0);
  for (auto m : kAllFusionModes) CHECK(parse_fusion_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_fusion_mode("bogus"), ConfigError);
}

TEST_CASE("protocol selection") {
  const std::vector<FeatureRecord> q{record({1, 0}, 0, View::Aerial, 0), record({0, 1}, 1, View::Ground, 3)};
  const std::vector<FeatureRecord> g{record({1, 0}, 0, View::Ground, 4), record({0, 1}, 1, View::Aerial, 1)};
  const auto a2g = apply_protocol(q, g, Direction::AtoG);
  CHECK(a2g.queries == std::vector<size_t>{0});
  CHECK(a2g.gallery == std::vector<size_t>{0});
  const auto g2a = apply_protocol(q, g, Direction::GtoA);
  CHECK(g2a.queries == std::vector<size_t>{1});
  CHECK(g2a.gallery == std::vector<size_t>{1});

  const std::vector<FeatureRecord> ground_only{record({1, 0}, 0, View::Ground, 4)};
  CHECK_THROWS_AS(apply_protocol(q, ground_only, Direction::GtoA), DataError);
  CHECK_THROWS_AS(apply_protocol(q, g, Direction::Both), ContractError);

  const auto both = evaluate_records(q, g, Direction::Both, FusionMode::Real);
  const auto ra = evaluate_records(q, g, Direction::AtoG, FusionMode::Real);
  const auto rg = evaluate_records(q, g, Direction::GtoA, FusionMode::Real);
  CHECK(both.map_score == doctest::Approx((ra.map_score + rg.map_score) / 2));
  CHECK(both.rank_k.at(1) == doctest::Approx((ra.rank_k.at(1) + rg.rank_k.at(1)) / 2));
  CHECK(parse_direction("a2g") == Direction::AtoG);
  CHECK(parse_direction("A<->G") == Direction::Both);
}

TEST_CASE("report JSON round-trip") {
  Tensor d({2, 3});
  Rng rng(52);
  for (auto& v : d.span()) v = rng.uniform();
  auto r = cmc_map_minp(d, {{0, 1}, {0, 0}}, {{0, 1, 1}, {1, 1, 2}}, 3);
  r.protocol = "A->G";
  const auto back = EvalReport::from_json(r.to_json());
  CHECK(back.map_score == r.map_score);
  CHECK(back.minp == r.minp);
  CHECK(back.rank_k == r.rank_k);
  CHECK(back.cmc == r.cmc);
  CHECK(back.protocol == r.protocol);
  CHECK(back.excluded == r.excluded);
  CHECK(r.table().find("mAP") != std::string::npos);
}

TEST_CASE("feature dump round-trip") {
  Rng rng(53);
  const Tensor f = testutil::randn({3, 4}, rng);
  const std::vector<FeatureRecord> recs{record({}, 1, View::Aerial, 0), record({}, 2, View::Ground, 3),
                                        record({}, 2, View::Aerial, 1)};
  const auto dir = std::filesystem::temp_directory_path();
  write_feature_dump(dir / "sdreid_feat.bin", dir / "sdreid_feat.csv", f, recs);
  const Tensor back = read_feature_matrix(dir / "sdreid_feat.bin");
  CHECK(back.shape() == f.shape());
  for (size_t i = 0; i < f.size(); ++i) CHECK(back[i] == f[i]);
  std::filesystem::remove(dir / "sdreid_feat.bin");
  std::filesystem::remove(dir / "sdreid_feat.csv");
}
