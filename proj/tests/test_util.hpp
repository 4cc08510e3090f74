#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sdreid/autograd.hpp"
#include "sdreid/nn.hpp"
#include "sdreid/rng.hpp"
#include "sdreid/tensor.hpp"

namespace testutil {

using sdreid::Rng;
using sdreid::Shape;
using sdreid::Tensor;
namespace ag = sdreid::ag;

inline Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  sdreid::fill_normal(t, rng, scale);
  return t;
}

using ScalarFn = std::function<ag::Var(const std::vector<ag::Var>&)>;

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs,
/// with central differences of step h.
inline double gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<ag::Var> vars;
  for (const auto& t : inputs) vars.push_back(ag::parameter(t));
  ag::backward(f(vars));
  double diff2 = 0, an2 = 0, num2 = 0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval_at = [&](double delta) {
        std::vector<ag::Var> vs;
        for (size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          vs.push_back(ag::constant(t));
        }
        return f(vs).value().item();
      };
      const double num = (eval_at(h) - eval_at(-h)) / (2 * h);
      const Tensor& g = vars[k].grad();
      const double an = g.size() ? g[i] : 0.0;
      diff2 += (an - num) * (an - num);
      an2 += an * an;
      num2 += num * num;
    }
  }
  const double denom = std::max(std::sqrt(std::max(an2, num2)), 1e-12);
  return std::sqrt(diff2) / denom;
}

/// Weighted sum with fixed random weights, to turn any output into a scalar.
inline ag::Var project(const ag::Var& x, uint64_t seed = 99) {
  Rng rng(seed, "projection");
  Tensor w = randn(x.shape(), rng);
  return ag::sum(ag::mul(x, ag::constant(w)));
}

/// Finite-difference check of parameter gradients held in a store. `loss`
/// rebuilds the graph from the current parameter values each call; at most
/// `per_param` entries of each named parameter are probed.
inline double param_gradcheck(sdreid::nn::ParamStore& store, const std::vector<std::string>& names,
                              const std::function<ag::Var()>& loss, size_t per_param = 6, double h = 1e-5) {
  store.zero_grad();
  ag::backward(loss());
  double diff2 = 0, an2 = 0, num2 = 0;
  for (const auto& name : names) {
    auto& p = store.get(name);
    const Tensor g = p.grad();
    const size_t n = p.value().size();
    const size_t stride = std::max<size_t>(1, n / per_param);
    for (size_t i = 0; i < n; i += stride) {
      const double orig = p.value()[i];
      p.mutable_value()[i] = orig + h;
      const double up = loss().value().item();
      p.mutable_value()[i] = orig - h;
      const double down = loss().value().item();
      p.mutable_value()[i] = orig;
      const double num = (up - down) / (2 * h);
      const double an = g.size() ? g[i] : 0.0;
      diff2 += (an - num) * (an - num);
      an2 += an * an;
      num2 += num * num;
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(std::max(an2, num2)), 1e-12);
}

inline bool all_zero(const Tensor& t) {
  for (size_t i = 0; i < t.size(); ++i)
    if (t[i] != 0.0) return false;
  return true;
}

}  // namespace testutil
