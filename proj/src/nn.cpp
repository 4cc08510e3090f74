#include "sdreid/nn.hpp"

#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::nn {

ag::Var& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name) || contains_buffer(name)) throw ContractError("duplicate parameter " + name);
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(ag::parameter(std::move(init)));
  return params_.back();
}

Tensor& ParamStore::add_buffer(const std::string& name, Tensor init) {
  if (contains(name) || contains_buffer(name)) throw ContractError("duplicate buffer " + name);
  buffer_index_[name] = buffers_.size();
  buffer_names_.push_back(name);
  buffers_.push_back(std::move(init));
  return buffers_.back();
}

ag::Var& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

const ag::Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

Tensor& ParamStore::buffer(const std::string& name) {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ContractError("unknown buffer " + name);
  return buffers_[it->second];
}

const Tensor& ParamStore::buffer(const std::string& name) const {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ContractError("unknown buffer " + name);
  return buffers_[it->second];
}

int64_t ParamStore::num_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_) n += static_cast<int64_t>(p.value().size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
  for (size_t i = 0; i < names_.size(); ++i) {
    const auto& src = other.get(names_[i]).value();
    if (src.shape() != params_[i].shape()) throw ContractError("shape mismatch copying " + names_[i]);
    params_[i].mutable_value() = src;
  }
  for (size_t i = 0; i < buffer_names_.size(); ++i) buffers_[i] = other.buffer(buffer_names_[i]);
}

Tensor init_linear(int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(w, rng, -bound, bound);
  return w;
}

Tensor init_conv(int64_t out, int64_t in, int64_t k, Rng& rng) {
  Tensor w({out, in, k, k});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  fill_uniform(w, rng, -bound, bound);
  return w;
}

Tensor init_bias(int64_t n, int64_t fan_in, Rng& rng) {
  Tensor b({n});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(b, rng, -bound, bound);
  return b;
}

}  // namespace sdreid::nn
