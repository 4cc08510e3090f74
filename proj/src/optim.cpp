#include "sdreid/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sdreid::optim {

Sgd::Sgd(nn::ParamStore& params, double momentum, double weight_decay)
    : params_(params), momentum_(momentum), weight_decay_(weight_decay) {}

void Sgd::step(double lr) {
  for (const auto& name : params_.names()) {
    auto& p = params_.get(name);
    const Tensor& g = p.grad();
    if (g.empty()) continue;
    auto& v = velocity_[name];
    if (v.size() != g.size()) v = Tensor(g.shape(), 0.0);
    Tensor& w = p.mutable_value();
    for (size_t i = 0; i < w.size(); ++i) {
      const double d = g[i] + weight_decay_ * w[i];
      v[i] = momentum_ * v[i] + d;
      w[i] -= lr * v[i];
    }
  }
}

Adam::Adam(nn::ParamStore& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& name : params_.names()) {
    auto& p = params_.get(name);
    const Tensor& g = p.grad();
    if (g.empty()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != g.size()) {
      m = Tensor(g.shape(), 0.0);
      v = Tensor(g.shape(), 0.0);
    }
    Tensor& w = p.mutable_value();
    for (size_t i = 0; i < w.size(); ++i) {
      const double d = g[i] + weight_decay_ * w[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * d;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * d * d;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double warmup_cosine_lr(double base_lr, double epoch, double warmup, double total, double min_factor) {
  if (warmup > 0.0 && epoch < warmup) return base_lr * (epoch + 1.0) / (warmup + 1.0);
  const double span = std::max(total - warmup, 1.0);
  const double progress = std::clamp((epoch - warmup) / span, 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base_lr * (min_factor + (1.0 - min_factor) * cosine);
}

double grad_norm(const nn::ParamStore& params) {
  double s = 0.0;
  for (const auto& name : params.names())
    for (double g : params.get(name).grad().span()) s += g * g;
  return std::sqrt(s);
}

void clip_grad_norm(nn::ParamStore& params, double max_norm) {
  const double n = grad_norm(params);
  if (n <= max_norm || n == 0.0) return;
  const double f = max_norm / n;
  for (const auto& name : params.names()) {
    auto& p = params.get(name);
    if (p.grad().empty()) continue;
    for (auto& g : p.node()->grad.span()) g *= f;
  }
}

}  // namespace sdreid::optim
