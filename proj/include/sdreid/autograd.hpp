#pragma once

// Tape-free reverse-mode differentiation over Tensor values. Each op returns
// a Var that owns its value and, when gradients are enabled, links to its
// inputs with a closure that pushes its output gradient back to them.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sdreid/kernels.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::ag {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  /// Gradient buffer, zero-initialized on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(size_t i) const { return node_->value.dim(i); }
  /// Empty tensor when no gradient has reached this node.
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor t);
Var parameter(Tensor t);

/// Seeds d(root)/d(root) = 1 for a scalar root and propagates to every
/// reachable node that requires grad.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph construction in its scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using BackwardFn = std::function<void(Node&)>;

/// Builds a result node; the closure is kept only when some input needs grad.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn);

// Elementwise and shape ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var reshape(const Var& a, Shape shape);
Var detach(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);

// Dense layers. Weights are stored [in, out].
Var matmul(const Var& a, const Var& b);
Var linear(const Var& x, const Var& w, const Var& b = Var());
Var gelu(const Var& x);
Var silu(const Var& x);

/// Row-wise layer normalization of x[M, C].
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

/// Batch normalization of x[B, C] with batch statistics; the biased batch
/// mean and variance are written to the optional outputs.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, std::vector<double>* batch_mean,
                     std::vector<double>* batch_var);
/// Batch normalization with fixed statistics.
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const std::vector<double>& mean,
                    const std::vector<double>& var, double eps);

/// Group normalization of x[B, C, H, W].
Var group_norm(const Var& x, int64_t groups, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Fused multi-head scaled dot-product attention, see kernels::attention_forward.
Var attention(const Var& q, const Var& k, const Var& v, const kernels::AttentionShape& shape);

// Token sequence helpers; sequences are [batch*len, C], sample-major.
Var slice_cols(const Var& x, int64_t begin, int64_t end);
Var concat_sequences(const Var& a, int64_t len_a, const Var& b, int64_t len_b, int64_t batch);
/// t[S, C] repeated for every sample -> [batch*S, C].
Var broadcast_batch(const Var& t, int64_t batch);
/// x[batch*S, C] + p[S, C].
Var add_broadcast_batch(const Var& x, const Var& p, int64_t batch);
/// Row `pos` of every sample -> [batch, C].
Var select_position(const Var& x, int64_t batch, int64_t len, int64_t pos);
/// Stacks parts [batch, C] -> [batch*parts.size(), C] with part order per sample.
Var stack_per_sample(const std::vector<Var>& parts);
/// Sample b of the result comes from `replacement` when use_replacement[b].
/// real: [batch*S, C]; replacement: [S, C].
Var replace_samples(const Var& real, const Var& replacement, const std::vector<bool>& use_replacement);

// Feature-map ops on [B, C, H, W].
Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
Var avg_pool2d(const Var& x, int64_t k);
Var upsample_nearest2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
/// x[B, C, H, W] + e[B, C] broadcast over space.
Var add_channel_bias(const Var& x, const Var& e);
/// [B, C, H, W] -> [B*H*W, C] and back.
Var nchw_to_tokens(const Var& x);
Var tokens_to_nchw(const Var& t, int64_t batch, int64_t channels, int64_t height, int64_t width);

}  // namespace sdreid::ag
