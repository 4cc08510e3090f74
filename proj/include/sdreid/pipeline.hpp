#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdreid/condition.hpp"
#include "sdreid/config.hpp"
#include "sdreid/denoiser.hpp"
#include "sdreid/diffusion.hpp"
#include "sdreid/encoder.hpp"
#include "sdreid/memory_bank.hpp"
#include "sdreid/objectives.hpp"
#include "sdreid/retrieval.hpp"

namespace sdreid::pipeline {

namespace fs = std::filesystem;

/// Run-output root: $SDREID_RUN_ROOT, else ./runs.
fs::path run_root();

/// Writes the synthetic corpus of `cfg` as PNGs + manifest under dir.
/// Returns the corpus digest.
std::string synthesize(const RunConfig& cfg, const fs::path& dir);

/// Loads the dataset through the manifest path: cfg.data.root when set,
/// otherwise `synthetic_dir`. Throws DataError when absent.
std::vector<data::ImageSample> load_dataset(const RunConfig& cfg, const fs::path& synthetic_dir);

struct Stage1Model {
  std::unique_ptr<model::VitEncoder> encoder;
  std::unique_ptr<model::ViewPrototypeBank> bank;
  int64_t step = 0;
};

struct Stage1Options {
  /// Stop once this many steps have been taken in total (-1: run to the end).
  int64_t stop_after_steps = -1;
  fs::path resume_from;
  std::function<void(const std::string&)> log;
};

struct Stage1Result {
  fs::path checkpoint;
  std::string sha256;
  int64_t steps = 0;
  int64_t total_steps = 0;
  std::vector<loss::Stage1LossReport> history;
};

Stage1Result train_stage1(const RunConfig& cfg, const std::vector<data::ImageSample>& samples, const fs::path& ckpt_path,
                          const Stage1Options& opt = {});
Stage1Model load_stage1(const fs::path& path);

struct Stage2Model {
  std::unique_ptr<model::ConditionLearner> learner;
  std::unique_ptr<model::Denoiser> denoiser;
  diffusion::NoiseSchedule schedule;
  /// Generation targets are standardized per dimension with these.
  Tensor target_mean;
  Tensor target_std;
  std::string stage1_sha256;
};

struct Stage2Options {
  int64_t stop_after_steps = -1;
  std::function<void(const std::string&)> log;
};

struct Stage2Result {
  fs::path checkpoint;
  std::string sha256;
  int64_t steps = 0;
  std::vector<double> history;
  /// Held-out draw of (t, eps) over the training set after training.
  double eval_mse = 0;
  double zero_predictor_mse = 0;
};

Stage2Result train_stage2(const RunConfig& cfg, const std::vector<data::ImageSample>& samples,
                          const fs::path& stage1_ckpt, const fs::path& ckpt_path, const Stage2Options& opt = {});
Stage2Model load_stage2(const fs::path& path);

/// Real features of the selected samples.
std::vector<eval::FeatureRecord> real_records(const Stage1Model& s1, const std::vector<data::ImageSample>& samples,
                                              const std::vector<size_t>& indices);

/// Adds generated aerial and ground features to each record. Sample i of
/// `indices` draws its noise from streams keyed by indices[i], so results do
/// not depend on chunking.
void generate_all_view_features(const Stage1Model& s1, const Stage2Model& s2,
                                const std::vector<data::ImageSample>& samples, const std::vector<size_t>& indices,
                                std::vector<eval::FeatureRecord>& records, const diffusion::SamplerConfig& sampling,
                                uint64_t seed);

/// Reports for every fusion mode the records support.
std::map<eval::FusionMode, eval::EvalReport> evaluate_all(const std::vector<eval::FeatureRecord>& queries,
                                                          const std::vector<eval::FeatureRecord>& gallery,
                                                          eval::Direction dir);

nlohmann::json reports_to_json(const std::map<eval::FusionMode, eval::EvalReport>& reports);

/// Persists / restores the records of one split (real and generated parts).
void save_records(const std::vector<eval::FeatureRecord>& records, const fs::path& dir, const std::string& split);
std::vector<eval::FeatureRecord> load_records(const fs::path& dir, const std::string& split);

/// Merges `patch` into dir/manifest.json.
void update_run_manifest(const fs::path& dir, const nlohmann::json& patch);

/// synth (if needed) -> stage 1 -> stage 2 -> generate -> eval inside dir.
/// Returns the metrics JSON that eval writes.
nlohmann::json run_all(const RunConfig& cfg, const fs::path& dir, const std::function<void(const std::string&)>& log = {});

}  // namespace sdreid::pipeline
