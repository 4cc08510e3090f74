#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdreid/autograd.hpp"
#include "sdreid/condition.hpp"
#include "sdreid/nn.hpp"

namespace sdreid::model {

enum class VrdMechanism { DownConv, Pooling, Projection };
enum class VrdPositions { Down, Up, Both };

std::string to_string(VrdMechanism m);
std::string to_string(VrdPositions p);
VrdMechanism parse_vrd_mechanism(const std::string& s);
VrdPositions parse_vrd_positions(const std::string& s);

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t latent_height = 4;
  int64_t latent_width = 4;
  /// One entry per resolution; each level after the first halves H and W.
  std::vector<int64_t> widths{64, 128};
  int64_t num_res_blocks = 1;
  int64_t time_dim = 64;
  int64_t context_dim = 64;
  int64_t groups = 8;
  VrdMechanism vrd_mechanism = VrdMechanism::DownConv;
  VrdPositions vrd_positions = VrdPositions::Both;
  bool vrd_enabled = true;

  void validate() const;
  int64_t feature_dim() const { return latent_channels * latent_height * latent_width; }
  int64_t levels() const { return static_cast<int64_t>(widths.size()); }
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Latent = row-major reshape of the feature vector to [c, h, w].
Tensor feature_to_latent(const std::vector<double>& feature, const DenoiserConfig& cfg);
std::vector<double> latent_to_feature(const Tensor& latent);

/// Feature-map shape [C, H, W] of one VRD injection site.
struct BlockShape {
  std::string name;  // "down.<i>" or "up.<i>"
  int64_t channels = 0, height = 0, width = 0;
};

struct VrdOutput {
  std::vector<BlockShape> blocks;
  std::vector<ag::Var> maps;  // [B, C, H, W] per block
};

/// Sinusoidal embedding [B, dim] of integer timesteps.
Tensor timestep_embedding(const std::vector<int64_t>& t, int64_t dim);

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Every block the configured positions inject into, in forward order.
  const std::vector<BlockShape>& vrd_blocks() const { return vrd_blocks_; }

  VrdOutput vrd_forward(const ag::Var& view_feature) const;

  /// z [B, D] flattened latents, one timestep per sample -> eps [B, D].
  ag::Var eps_predict(const ag::Var& z, const std::vector<int64_t>& t, const ConditionBundle& cond) const;

 private:
  ag::Var res_block(const ag::Var& x, const ag::Var& temb, const std::string& p) const;
  ag::Var cross_attention(const ag::Var& x, const ag::Var& context, int64_t rows, const std::string& p) const;
  void add_res_block(const std::string& p, int64_t cin, int64_t cout, Rng& rng);
  void add_cross_attention(const std::string& p, int64_t c, Rng& rng);
  void add_vrd(const BlockShape& b, Rng& rng);
  const ag::Var* vrd_map(const VrdOutput& v, const std::string& name) const;

  DenoiserConfig cfg_;
  nn::ParamStore params_;
  std::vector<BlockShape> vrd_blocks_;
};

}  // namespace sdreid::model
