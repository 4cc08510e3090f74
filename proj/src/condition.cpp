#include "sdreid/condition.hpp"

#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::model {

using ag::Var;

ConditionInputs build_condition(const PersonRepresentation& rep, data::View target_view, const ViewPrototypeBank& bank,
                                ConditionMode mode) {
  ConditionInputs in;
  in.identity_rows = rep.intermediate_classes;
  in.view_row = bank.get(target_view);
  if (mode == ConditionMode::Train || target_view == rep.view) {
    in.vrd_source = rep.view_feature;
  } else {
    in.vrd_source = in.view_row;
  }
  return in;
}

void ConditionConfig::validate() const {
  if (embed_dim <= 0) throw ConfigError("condition learner: embed_dim must be positive");
  if (num_id_conditions < 0) throw ConfigError("condition learner: num_id_conditions must be >= 0");
  if (num_layers < 1) throw ConfigError("condition learner: R must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("condition learner: mlp_ratio must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("condition learner: dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ConditionConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},
                     {"num_id_conditions", c.num_id_conditions},
                     {"num_layers", c.num_layers},
                     {"mlp_ratio", c.mlp_ratio},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ConditionConfig& c) {
  ConditionConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_id_conditions = j.value("num_id_conditions", d.num_id_conditions);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.dropout = j.value("dropout", d.dropout);
}

ConditionLearner::ConditionLearner(const ConditionConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "condition");
  const int64_t d = cfg_.embed_dim, hidden = d * cfg_.mlp_ratio;
  for (int64_t k = 0; k < cfg_.num_id_conditions; ++k) {
    const std::string p = "id_proj." + std::to_string(k) + ".";
    params_.add(p + "weight", nn::init_linear(d, d, rng));
    params_.add(p + "bias", nn::init_bias(d, d, rng));
  }
  for (int64_t r = 0; r < cfg_.num_layers; ++r) {
    const std::string p = "layers." + std::to_string(r) + ".";
    params_.add(p + "wq", nn::init_linear(d, d, rng));
    params_.add(p + "wk", nn::init_linear(d, d, rng));
    params_.add(p + "wv", nn::init_linear(d, d, rng));
    params_.add(p + "mlp.fc1.weight", nn::init_linear(d, hidden, rng));
    params_.add(p + "mlp.fc1.bias", nn::init_bias(hidden, d, rng));
    params_.add(p + "mlp.fc2.weight", nn::init_linear(hidden, d, rng));
    params_.add(p + "mlp.fc2.bias", nn::init_bias(d, hidden, rng));
  }
  Tensor null_ctx({cfg_.rows(), d});
  fill_trunc_normal(null_ctx, rng, 0.02);
  params_.add("null.context", std::move(null_ctx));
  Tensor null_vrd({1, d});
  fill_trunc_normal(null_vrd, rng, 0.02);
  params_.add("null.vrd", std::move(null_vrd));
}

ConditionBundle ConditionLearner::assemble(const std::vector<ConditionInputs>& inputs) const {
  const int64_t b = static_cast<int64_t>(inputs.size()), k = cfg_.num_id_conditions, d = cfg_.embed_dim;
  Tensor ids({b * k, d}), views({b, d}), vrd({b, d});
  for (int64_t i = 0; i < b; ++i) {
    const auto& in = inputs[static_cast<size_t>(i)];
    if (in.identity_rows.size() != static_cast<size_t>(k * d) || static_cast<int64_t>(in.view_row.size()) != d ||
        static_cast<int64_t>(in.vrd_source.size()) != d) {
      throw ContractError("condition learner: input of sample " + std::to_string(i) + " has the wrong shape");
    }
    std::copy(in.identity_rows.data(), in.identity_rows.data() + k * d, ids.data() + i * k * d);
    std::copy(in.view_row.begin(), in.view_row.end(), views.data() + i * d);
    std::copy(in.vrd_source.begin(), in.vrd_source.end(), vrd.data() + i * d);
  }
  return assemble(ids, views, vrd);
}

ConditionBundle ConditionLearner::assemble(const Tensor& identity_rows, const Tensor& view_rows,
                                           const Tensor& vrd_source) const {
  const int64_t k = cfg_.num_id_conditions, d = cfg_.embed_dim;
  if (view_rows.ndim() != 2 || view_rows.dim(1) != d) throw ContractError("condition learner: view rows must be [B, d]");
  const int64_t b = view_rows.dim(0);
  if (identity_rows.size() != static_cast<size_t>(b * k * d)) {
    throw ContractError("condition learner: expected " + std::to_string(k) + " identity rows per sample");
  }
  if (vrd_source.shape() != view_rows.shape()) throw ContractError("condition learner: vrd source must be [B, d]");
  ConditionBundle out;
  out.batch = b;
  out.rows = k + 1;
  Var view = ag::constant(view_rows);
  if (k > 0) {
    Var ids = ag::constant(identity_rows.reshaped({b * k, d}));
    std::vector<Var> parts;
    for (int64_t j = 0; j < k; ++j) {
      const std::string p = "id_proj." + std::to_string(j) + ".";
      parts.push_back(ag::linear(ag::select_position(ids, b, k, j), params_.get(p + "weight"), params_.get(p + "bias")));
    }
    out.context = ag::concat_sequences(ag::stack_per_sample(parts), k, view, 1, b);
  } else {
    out.context = view;
  }
  out.vrd_source = ag::constant(vrd_source);
  return out;
}

Var ConditionLearner::refine_layer(const Var& f, int64_t layer, int64_t batch) const {
  const std::string p = "layers." + std::to_string(layer) + ".";
  const int64_t d = cfg_.embed_dim, s = cfg_.rows();
  const auto& P = params_;
  Var q = ag::matmul(f, P.get(p + "wq"));
  Var k = ag::matmul(f, P.get(p + "wk"));
  Var v = ag::matmul(f, P.get(p + "wv"));
  kernels::AttentionShape as{batch, s, s, 1, d, 1.0 / std::sqrt(static_cast<double>(d))};
  Var mid = ag::add(f, ag::attention(q, k, v, as));
  Var m = ag::linear(ag::gelu(ag::linear(mid, P.get(p + "mlp.fc1.weight"), P.get(p + "mlp.fc1.bias"))),
                     P.get(p + "mlp.fc2.weight"), P.get(p + "mlp.fc2.bias"));
  return ag::add(mid, m);
}

ConditionBundle ConditionLearner::refine(const ConditionBundle& in) const {
  if (in.is_null) return in;
  if (in.rows != cfg_.rows()) throw ContractError("condition learner: bundle row count mismatch");
  ConditionBundle out = in;
  for (int64_t r = 0; r < cfg_.num_layers; ++r) out.context = refine_layer(out.context, r, in.batch);
  return out;
}

ConditionBundle ConditionLearner::null_condition(int64_t batch) const {
  ConditionBundle out;
  out.batch = batch;
  out.rows = cfg_.rows();
  out.context = ag::broadcast_batch(params_.get("null.context"), batch);
  out.vrd_source = ag::broadcast_batch(params_.get("null.vrd"), batch);
  out.is_null = true;
  return out;
}

ConditionBundle ConditionLearner::drop(const ConditionBundle& cond, const std::vector<bool>& mask) const {
  if (static_cast<int64_t>(mask.size()) != cond.batch) throw ContractError("condition dropout: mask size mismatch");
  ConditionBundle out = cond;
  out.context = ag::replace_samples(cond.context, params_.get("null.context"), mask);
  out.vrd_source = ag::replace_samples(cond.vrd_source, params_.get("null.vrd"), mask);
  return out;
}

}  // namespace sdreid::model
