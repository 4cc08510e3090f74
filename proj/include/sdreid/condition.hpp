#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "sdreid/autograd.hpp"
#include "sdreid/encoder.hpp"
#include "sdreid/memory_bank.hpp"
#include "sdreid/nn.hpp"

namespace sdreid::model {

enum class ConditionMode { Train, Infer };

/// Unlearned inputs of one condition: the identity descriptors, the view row
/// taken from the prototype bank, and the view feature routed to the VRD.
struct ConditionInputs {
  Tensor identity_rows;  // [K, C]
  std::vector<double> view_row;
  std::vector<double> vrd_source;
};

/// The view row is always the prototype of target_view. The VRD source is
/// the instance view feature in training or when target_view is the
/// sample's own view, and the target prototype otherwise.
ConditionInputs build_condition(const PersonRepresentation& rep, data::View target_view, const ViewPrototypeBank& bank,
                                ConditionMode mode);

/// Batched condition for B samples.
struct ConditionBundle {
  int64_t batch = 0;
  int64_t rows = 0;     // S = K + 1
  ag::Var context;      // [B*S, d]
  ag::Var vrd_source;   // [B, C]
  bool is_null = false;
};

struct ConditionConfig {
  int64_t embed_dim = 64;
  int64_t num_id_conditions = 3;
  int64_t num_layers = 1;  // R
  int64_t mlp_ratio = 2;
  double dropout = 0.1;

  void validate() const;
  int64_t rows() const { return num_id_conditions + 1; }
};

void to_json(nlohmann::json& j, const ConditionConfig& c);
void from_json(const nlohmann::json& j, ConditionConfig& c);

class ConditionLearner {
 public:
  ConditionLearner(const ConditionConfig& cfg, uint64_t seed);

  const ConditionConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Stacks inputs into a bundle: identity rows pass through their own
  /// learned projection, the view row is appended last as is.
  ConditionBundle assemble(const std::vector<ConditionInputs>& inputs) const;
  ConditionBundle assemble(const Tensor& identity_rows, const Tensor& view_rows, const Tensor& vrd_source) const;

  /// R single-head attention + MLP layers over the context.
  ConditionBundle refine(const ConditionBundle& in) const;
  ag::Var refine_layer(const ag::Var& context, int64_t layer, int64_t batch) const;

  /// Learned null context and null VRD vector, repeated over the batch.
  ConditionBundle null_condition(int64_t batch) const;

  /// Samples with drop[b] get the null condition.
  ConditionBundle drop(const ConditionBundle& cond, const std::vector<bool>& drop) const;

 private:
  ConditionConfig cfg_;
  nn::ParamStore params_;
};

}  // namespace sdreid::model
