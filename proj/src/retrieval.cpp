#include "sdreid/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <omp.h>

#include "sdreid/checkpoint.hpp"
#include "sdreid/errors.hpp"
#include "sdreid/kernels.hpp"

namespace sdreid::eval {

namespace {
constexpr char kFeatMagic[8] = {'S', 'D', 'R', 'D', 'F', 'E', 'A', 'T'};
constexpr uint32_t kFeatVersion = 1;

void append_normalized(std::vector<double>& out, const std::vector<double>& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  const double inv = n > 0 ? 1.0 / n : 0.0;
  for (double x : v) out.push_back(x * inv);
}
}  // namespace

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Real: return "real";
    case FusionMode::GenA: return "gen_a";
    case FusionMode::GenG: return "gen_g";
    case FusionMode::GenAG: return "gen_ag";
    case FusionMode::RealPlusGenAG: return "real+gen_ag";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& s) {
  for (FusionMode m : kAllFusionModes)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown fusion mode '" + s + "' (real, gen_a, gen_g, gen_ag, real+gen_ag)");
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::AtoG: return "A->G";
    case Direction::GtoA: return "G->A";
    case Direction::Both: return "A<->G";
  }
  return "?";
}

Direction parse_direction(const std::string& s) {
  if (s == "A->G" || s == "a2g") return Direction::AtoG;
  if (s == "G->A" || s == "g2a") return Direction::GtoA;
  if (s == "A<->G" || s == "both") return Direction::Both;
  throw ConfigError("unknown protocol '" + s + "' (a2g, g2a, both)");
}

std::vector<double> fuse(const FeatureRecord& r, FusionMode mode) {
  const bool real = mode == FusionMode::Real || mode == FusionMode::RealPlusGenAG;
  const bool ga = mode != FusionMode::Real && mode != FusionMode::GenG;
  const bool gg = mode != FusionMode::Real && mode != FusionMode::GenA;
  std::vector<double> out;
  if (real) append_normalized(out, r.real);
  if (ga) {
    if (!r.gen_aerial) throw ContractError("fuse: record has no generated aerial feature");
    append_normalized(out, *r.gen_aerial);
  }
  if (gg) {
    if (!r.gen_ground) throw ContractError("fuse: record has no generated ground feature");
    append_normalized(out, *r.gen_ground);
  }
  return out;
}

Tensor fuse_all(const std::vector<FeatureRecord>& records, const std::vector<size_t>& indices, FusionMode mode) {
  if (indices.empty()) return Tensor({0, 0});
  const auto first = fuse(records.at(indices[0]), mode);
  const auto d = static_cast<int64_t>(first.size());
  Tensor out({static_cast<int64_t>(indices.size()), d});
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto f = i == 0 ? first : fuse(records.at(indices[i]), mode);
    if (static_cast<int64_t>(f.size()) != d) throw ContractError("fuse_all: records differ in feature length");
    std::copy(f.begin(), f.end(), out.data() + static_cast<int64_t>(i) * d);
  }
  return out;
}

Tensor distance_matrix(const Tensor& q, const Tensor& g) {
  if (q.ndim() != 2 || g.ndim() != 2 || q.dim(1) != g.dim(1)) throw ContractError("distance_matrix: shape mismatch");
  Tensor out({q.dim(0), g.dim(0)});
  kernels::pairwise_distances(q.span(), q.dim(0), g.span(), g.dim(0), q.dim(1), out.span());
  return out;
}

ProtocolSelection apply_protocol(const std::vector<FeatureRecord>& queries, const std::vector<FeatureRecord>& gallery,
                                 Direction dir) {
  if (dir == Direction::Both) throw ContractError("apply_protocol: resolve A<->G as two directions");
  const data::View qv = dir == Direction::AtoG ? data::View::Aerial : data::View::Ground;
  ProtocolSelection sel;
  for (size_t i = 0; i < queries.size(); ++i)
    if (queries[i].view == qv) sel.queries.push_back(i);
  for (size_t i = 0; i < gallery.size(); ++i)
    if (gallery[i].view == data::other_view(qv)) sel.gallery.push_back(i);
  if (sel.queries.empty()) throw DataError("protocol " + to_string(dir) + ": no queries left after filtering");
  if (sel.gallery.empty()) throw DataError("protocol " + to_string(dir) + ": no gallery entries left after filtering");
  return sel;
}

EvalReport cmc_map_minp(const Tensor& dist, const RankingLabels& query, const RankingLabels& gallery,
                        int64_t cmc_length) {
  const int64_t m = dist.dim(0), n = dist.dim(1);
  if (static_cast<int64_t>(query.identity.size()) != m || static_cast<int64_t>(gallery.identity.size()) != n ||
      query.camera.size() != query.identity.size() || gallery.camera.size() != gallery.identity.size()) {
    throw ContractError("cmc_map_minp: label/distance size mismatch");
  }
  const int64_t len = std::max<int64_t>(1, std::min(cmc_length, n));
  // Per-query results, reduced serially afterwards so the sum order is fixed.
  std::vector<double> ap(static_cast<size_t>(m), 0.0), inp(static_cast<size_t>(m), 0.0);
  std::vector<int64_t> first_hit(static_cast<size_t>(m), -1);
  std::vector<char> valid(static_cast<size_t>(m), 0);

#pragma omp parallel for schedule(dynamic, 4) if (m * n >= 20000)
  for (int64_t i = 0; i < m; ++i) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const double* row = dist.data() + i * n;
    std::stable_sort(order.begin(), order.end(), [row](int64_t a, int64_t b) { return row[a] < row[b]; });
    const int64_t qid = query.identity[static_cast<size_t>(i)], qcam = query.camera[static_cast<size_t>(i)];
    int64_t rank = 0, hits = 0, last = 0, npos = 0;
    for (int64_t j = 0; j < n; ++j)
      if (gallery.identity[static_cast<size_t>(j)] == qid && gallery.camera[static_cast<size_t>(j)] != qcam) ++npos;
    if (npos == 0) continue;
    double sum_prec = 0;
    for (int64_t j : order) {
      const bool same_id = gallery.identity[static_cast<size_t>(j)] == qid;
      if (same_id && gallery.camera[static_cast<size_t>(j)] == qcam) continue;
      ++rank;
      if (same_id) {
        ++hits;
        if (first_hit[static_cast<size_t>(i)] < 0) first_hit[static_cast<size_t>(i)] = rank;
        sum_prec += static_cast<double>(hits) / static_cast<double>(rank);
        last = rank;
        if (hits == npos) break;
      }
    }
    valid[static_cast<size_t>(i)] = 1;
    ap[static_cast<size_t>(i)] = sum_prec / static_cast<double>(npos);
    inp[static_cast<size_t>(i)] = static_cast<double>(npos) / static_cast<double>(last);
  }

  EvalReport r;
  std::vector<int64_t> cmc_counts(static_cast<size_t>(len), 0);
  double ap_sum = 0, inp_sum = 0;
  int64_t count = 0;
  for (int64_t i = 0; i < m; ++i) {
    if (!valid[static_cast<size_t>(i)]) {
      ++r.excluded;
      continue;
    }
    ++count;
    ap_sum += ap[static_cast<size_t>(i)];
    inp_sum += inp[static_cast<size_t>(i)];
    const int64_t fh = first_hit[static_cast<size_t>(i)];
    for (int64_t k = fh; k <= len; ++k) ++cmc_counts[static_cast<size_t>(k - 1)];
  }
  r.num_queries = count;
  r.cmc.assign(static_cast<size_t>(len), 0.0);
  if (count > 0) {
    const double c = static_cast<double>(count);
    r.map_score = ap_sum / c;
    r.minp = inp_sum / c;
    for (int64_t k = 0; k < len; ++k) r.cmc[static_cast<size_t>(k)] = static_cast<double>(cmc_counts[static_cast<size_t>(k)]) / c;
  }
  for (int k : {1, 5, 10}) r.rank_k[k] = r.cmc[static_cast<size_t>(std::min<int64_t>(k, len) - 1)];
  return r;
}

EvalReport average_reports(const EvalReport& a, const EvalReport& b, const std::string& protocol) {
  EvalReport r;
  r.protocol = protocol;
  for (const auto& [k, v] : a.rank_k) r.rank_k[k] = 0.5 * (v + b.rank_k.at(k));
  r.map_score = 0.5 * (a.map_score + b.map_score);
  r.minp = 0.5 * (a.minp + b.minp);
  r.num_queries = a.num_queries + b.num_queries;
  r.excluded = a.excluded + b.excluded;
  const size_t len = std::min(a.cmc.size(), b.cmc.size());
  for (size_t i = 0; i < len; ++i) r.cmc.push_back(0.5 * (a.cmc[i] + b.cmc[i]));
  return r;
}

EvalReport evaluate_records(const std::vector<FeatureRecord>& queries, const std::vector<FeatureRecord>& gallery,
                            Direction dir, FusionMode mode) {
  if (dir == Direction::Both) {
    return average_reports(evaluate_records(queries, gallery, Direction::AtoG, mode),
                           evaluate_records(queries, gallery, Direction::GtoA, mode), to_string(dir));
  }
  const auto sel = apply_protocol(queries, gallery, dir);
  const Tensor q = fuse_all(queries, sel.queries, mode);
  const Tensor g = fuse_all(gallery, sel.gallery, mode);
  RankingLabels ql, gl;
  for (size_t i : sel.queries) {
    ql.identity.push_back(queries[i].identity);
    ql.camera.push_back(queries[i].camera_id);
  }
  for (size_t i : sel.gallery) {
    gl.identity.push_back(gallery[i].identity);
    gl.camera.push_back(gallery[i].camera_id);
  }
  EvalReport r = cmc_map_minp(distance_matrix(q, g), ql, gl);
  r.protocol = to_string(dir);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json ranks = nlohmann::json::object();
  for (const auto& [k, v] : rank_k) ranks["rank" + std::to_string(k)] = v;
  return nlohmann::json{{"protocol", protocol},   {"rank_k", ranks},       {"map", map_score},
                        {"minp", minp},           {"num_queries", num_queries},
                        {"excluded", excluded},   {"cmc", cmc}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.protocol = j.at("protocol").get<std::string>();
  for (const auto& [key, v] : j.at("rank_k").items()) r.rank_k[std::stoi(key.substr(4))] = v.get<double>();
  r.map_score = j.at("map").get<double>();
  r.minp = j.at("minp").get<double>();
  r.num_queries = j.at("num_queries").get<int64_t>();
  r.excluded = j.at("excluded").get<int64_t>();
  r.cmc = j.at("cmc").get<std::vector<double>>();
  return r;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << protocol << "  R1 " << 100 * rank_k.at(1) << "  R5 " << 100 * rank_k.at(5) << "  R10 " << 100 * rank_k.at(10)
     << "  mAP " << 100 * map_score << "  mINP " << 100 * minp << "  (" << num_queries << " queries";
  if (excluded > 0) os << ", " << excluded << " excluded";
  os << ")";
  return os.str();
}

void write_cmc_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f.precision(17);
  f << "rank,match_rate\n";
  for (size_t k = 0; k < r.cmc.size(); ++k) f << k + 1 << "," << r.cmc[k] << "\n";
}

void write_feature_dump(const std::filesystem::path& matrix_path, const std::filesystem::path& manifest_path,
                        const Tensor& features, const std::vector<FeatureRecord>& records) {
  if (features.ndim() != 2 || static_cast<size_t>(features.dim(0)) != records.size()) {
    throw ContractError("write_feature_dump: one matrix row per record required");
  }
  io::BinaryWriter w;
  w.bytes(kFeatMagic, 8);
  w.u32(kFeatVersion);
  w.u64(static_cast<uint64_t>(features.dim(0)));
  w.u64(static_cast<uint64_t>(features.dim(1)));
  w.bytes(features.data(), features.size() * sizeof(double));
  w.finish(matrix_path);
  std::ofstream f(manifest_path);
  if (!f) throw DataError("cannot write '" + manifest_path.string() + "'");
  f << "row,identity,view,camera_id\n";
  for (size_t i = 0; i < records.size(); ++i) {
    f << i << "," << records[i].identity << "," << data::view_token(records[i].view) << "," << records[i].camera_id
      << "\n";
  }
}

Tensor read_feature_matrix(const std::filesystem::path& matrix_path) {
  io::BinaryReader r(matrix_path, "feature dump");
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kFeatMagic, 8) != 0) throw FormatError("'" + matrix_path.string() + "' is not a feature dump");
  const uint32_t v = r.u32();
  if (v != kFeatVersion) throw FormatError("feature dump version " + std::to_string(v) + " is not supported");
  const auto rows = static_cast<int64_t>(r.u64()), cols = static_cast<int64_t>(r.u64());
  Tensor t({rows, cols});
  r.bytes(t.data(), t.size() * sizeof(double));
  return t;
}

}  // namespace sdreid::eval
