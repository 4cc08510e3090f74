#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "sdreid/augment.hpp"
#include "sdreid/condition.hpp"
#include "sdreid/data.hpp"
#include "sdreid/denoiser.hpp"
#include "sdreid/diffusion.hpp"
#include "sdreid/encoder.hpp"
#include "sdreid/retrieval.hpp"

namespace sdreid::pipeline {

struct DataConfig {
  /// Dataset root holding `manifest`; empty means the run's synthetic corpus.
  std::string root;
  std::string manifest = "manifest.csv";
  data::SyntheticCorpusSpec synthetic;
};

struct Stage1Config {
  int64_t epochs = 30;
  double lr = 0.008;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double warmup_epochs = 10;
  int64_t ids_per_batch = 16;
  int64_t instances_per_id = 4;
  double smoothing = 0.1;
  double margin = 0.3;
  bool view_loss = true;
  bool stop_view_gradient = false;
  double memory_alpha = 0.8;
  data::AugmentConfig augment{0.5, 2, 0.5};
};

struct Stage2Config {
  int64_t epochs = 30;
  double lr = 1e-4;
  int64_t batch_size = 32;
  int64_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double flip_prob = 0.5;
  /// SHA-256 of the stage-1 checkpoint; empty accepts the run's own one.
  std::string stage1_sha256;
};

struct RunConfig {
  std::string name = "default";
  uint64_t seed = 0;
  DataConfig data;
  model::EncoderConfig encoder;
  model::ConditionConfig condition;
  model::DenoiserConfig denoiser;
  Stage1Config stage1;
  Stage2Config stage2;
  diffusion::SamplerConfig sampling;
  eval::Direction protocol = eval::Direction::AtoG;

  /// Cross-field checks (ConfigError). Derived fields such as the number of
  /// training identities are filled in by the pipeline once data is loaded.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys take defaults; unknown keys are rejected with ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Desk preset used by the acceptance suite and the example config.
RunConfig desk_config();

}  // namespace sdreid::pipeline
