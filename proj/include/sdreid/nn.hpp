#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdreid/autograd.hpp"
#include "sdreid/rng.hpp"

namespace sdreid::nn {

/// Named trainable parameters plus named non-trainable buffers, in
/// registration order. Checkpoints serialize both.
class ParamStore {
 public:
  ag::Var& add(const std::string& name, Tensor init);
  Tensor& add_buffer(const std::string& name, Tensor init);

  ag::Var& get(const std::string& name);
  const ag::Var& get(const std::string& name) const;
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  bool contains_buffer(const std::string& name) const { return buffer_index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& buffer_names() const { return buffer_names_; }
  size_t size() const { return params_.size(); }
  int64_t num_scalars() const;

  void zero_grad();

  /// Copies values (not identity) of every parameter and buffer.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<ag::Var> params_;
  std::map<std::string, size_t> index_;
  std::vector<std::string> buffer_names_;
  std::vector<Tensor> buffers_;
  std::map<std::string, size_t> buffer_index_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a [fan_in, fan_out] matrix.
Tensor init_linear(int64_t fan_in, int64_t fan_out, Rng& rng);
/// Same rule for a conv kernel [out, in, k, k] (fan_in = in*k*k).
Tensor init_conv(int64_t out, int64_t in, int64_t k, Rng& rng);
Tensor init_bias(int64_t n, int64_t fan_in, Rng& rng);

}  // namespace sdreid::nn
