#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "sdreid/autograd.hpp"
#include "sdreid/data.hpp"
#include "sdreid/nn.hpp"

namespace sdreid::model {

struct EncoderConfig {
  int64_t image_height = 32;
  int64_t image_width = 32;
  int64_t patch_size = 8;
  int64_t embed_dim = 64;
  int64_t num_layers = 4;
  int64_t num_heads = 4;
  int64_t mlp_ratio = 4;
  int64_t num_train_identities = 1;
  /// Number of intermediate class tokens handed to the condition learner;
  /// -1 selects num_layers - 1.
  int64_t num_id_conditions = -1;

  void validate() const;
  int64_t num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
  int64_t patch_dim() const { return patch_size * patch_size * 3; }
  int64_t k_id() const { return num_id_conditions < 0 ? num_layers - 1 : num_id_conditions; }
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Batched encoder activations.
struct EncoderOutput {
  int64_t batch = 0;
  ag::Var final_class;    // [B, C], I^L after the final norm
  ag::Var view_feature;   // [B, C], output view token (undefined without it)
  ag::Var intermediate;   // [B*K, C], sample-major (undefined when K = 0)
  /// Class token entering each layer and leaving the last: I^0 .. I^L
  /// (the last one before the final norm).
  std::vector<ag::Var> class_tokens;
};

struct HeadOutput {
  ag::Var id_logits;    // [B, num_ids]
  ag::Var view_logits;  // [B, 2]
};

struct PersonRepresentation {
  std::vector<double> final_class;
  Tensor intermediate_classes;  // [K, C]
  std::vector<double> view_feature;
  data::View view = data::View::Ground;
  int64_t identity = 0;
};

class VitEncoder {
 public:
  VitEncoder(const EncoderConfig& cfg, uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Selects how many intermediate class tokens forward() collects; the
  /// parameters do not depend on it.
  void set_num_id_conditions(int64_t k);

  void set_input_stats(const std::array<double, 3>& mean, const std::array<double, 3>& stddev);

  /// Standardized, flattened patches [B*N, 3*p*p]; images are [B, H, W, 3].
  Tensor patchify(const Tensor& images) const;
  /// Linear patch projection only, [B*N, C].
  ag::Var project_patches(const Tensor& images) const;
  /// Class token + projected patches + positions, [B*(1+N), C].
  ag::Var patch_embed(const Tensor& images) const;
  /// Pre-norm block: attention + residual, MLP + residual.
  ag::Var transformer_layer(const ag::Var& seq, int64_t layer, int64_t batch, int64_t len) const;

  EncoderOutput forward(const Tensor& images, bool with_view_token = true) const;

  /// BN-then-linear identity head on the final class token and a linear view
  /// head on the view feature. Training mode uses batch statistics and
  /// updates the running ones.
  HeadOutput heads(const EncoderOutput& out, bool training, bool stop_view_gradient = false);

  /// Inference encode of the selected samples, processed in chunks.
  std::vector<PersonRepresentation> encode(const std::vector<data::ImageSample>& samples,
                                           const std::vector<size_t>& indices, int64_t chunk = 64) const;

 private:
  EncoderConfig cfg_;
  nn::ParamStore params_;
  double bn_momentum_ = 0.1;
};

/// Per-channel mean/std of the pixels of the selected samples.
std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const std::vector<data::ImageSample>& samples,
                                                                      const std::vector<size_t>& indices);

}  // namespace sdreid::model
