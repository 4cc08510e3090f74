#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdreid/nn.hpp"

namespace sdreid::optim {

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  Sgd(nn::ParamStore& params, double momentum, double weight_decay);
  void step(double lr);
  /// Momentum buffers, by parameter name (checkpointed for resume).
  std::map<std::string, Tensor>& state() { return velocity_; }

 private:
  nn::ParamStore& params_;
  double momentum_;
  double weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

class Adam {
 public:
  Adam(nn::ParamStore& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0);
  void step(double lr);
  int64_t steps() const { return t_; }

 private:
  nn::ParamStore& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Linear warmup over `warmup` epochs then cosine decay to `min_factor`.
double warmup_cosine_lr(double base_lr, double epoch, double warmup, double total, double min_factor = 0.01);

/// Euclidean norm over every gradient in the store.
double grad_norm(const nn::ParamStore& params);
/// Scales all gradients so their global norm is at most max_norm.
void clip_grad_norm(nn::ParamStore& params, double max_norm);

}  // namespace sdreid::optim
