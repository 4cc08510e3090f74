#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdreid/data.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::eval {

enum class FusionMode { Real, GenA, GenG, GenAG, RealPlusGenAG };
inline constexpr FusionMode kAllFusionModes[] = {FusionMode::Real, FusionMode::GenA, FusionMode::GenG,
                                                 FusionMode::GenAG, FusionMode::RealPlusGenAG};
std::string to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);

enum class Direction { AtoG, GtoA, Both };
std::string to_string(Direction d);
Direction parse_direction(const std::string& s);

struct FeatureRecord {
  std::vector<double> real;
  std::optional<std::vector<double>> gen_aerial;
  std::optional<std::vector<double>> gen_ground;
  int64_t identity = 0;
  data::View view = data::View::Ground;
  int64_t camera_id = 0;
};

/// Each selected part L2-normalized, concatenated as (real, genA, genG).
std::vector<double> fuse(const FeatureRecord& r, FusionMode mode);

/// Stacks fuse(r, mode) for the selected records into [n, d].
Tensor fuse_all(const std::vector<FeatureRecord>& records, const std::vector<size_t>& indices, FusionMode mode);

/// Euclidean distances [m, n] between rows of q [m, d] and g [n, d].
Tensor distance_matrix(const Tensor& q, const Tensor& g);

struct ProtocolSelection {
  std::vector<size_t> queries;
  std::vector<size_t> gallery;
};

/// Keeps queries of the source view and gallery entries of the other view.
/// Both is resolved by the caller as the mean of the two directions.
ProtocolSelection apply_protocol(const std::vector<FeatureRecord>& queries, const std::vector<FeatureRecord>& gallery,
                                 Direction dir);

struct RankingLabels {
  std::vector<int64_t> identity;
  std::vector<int64_t> camera;
};

struct EvalReport {
  std::map<int, double> rank_k;  // k in {1, 5, 10}
  double map_score = 0;
  double minp = 0;
  std::string protocol;
  int64_t num_queries = 0;
  int64_t excluded = 0;
  std::vector<double> cmc;  // cmc[k-1] = fraction matched within rank k

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  std::string table() const;
};

/// CMC / mAP / mINP. Gallery entries sharing identity and camera with the
/// query are junk and skipped; ties keep gallery index order. Queries without
/// any valid positive are excluded and counted.
EvalReport cmc_map_minp(const Tensor& dist, const RankingLabels& query, const RankingLabels& gallery,
                        int64_t cmc_length = 50);

/// Element-wise mean of two reports (A<->G).
EvalReport average_reports(const EvalReport& a, const EvalReport& b, const std::string& protocol);

/// Full evaluation of one direction (or both, averaged) under one fusion mode.
EvalReport evaluate_records(const std::vector<FeatureRecord>& queries, const std::vector<FeatureRecord>& gallery,
                            Direction dir, FusionMode mode);

void write_cmc_csv(const EvalReport& r, const std::filesystem::path& path);

/// Feature dump: binary float64 matrix (versioned, CRC32) plus a CSV manifest
/// of labels per row.
void write_feature_dump(const std::filesystem::path& matrix_path, const std::filesystem::path& manifest_path,
                        const Tensor& features, const std::vector<FeatureRecord>& records);
Tensor read_feature_matrix(const std::filesystem::path& matrix_path);

}  // namespace sdreid::eval
