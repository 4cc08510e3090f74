#include "sdreid/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::diffusion {

NoiseSchedule make_schedule(int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("diffusion: T must be >= 1");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) {
    throw ConfigError("diffusion: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<size_t>(T));
  for (int64_t i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas[static_cast<size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return make_schedule_from_betas(std::move(betas));
}

NoiseSchedule make_schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("diffusion: empty beta schedule");
  NoiseSchedule s;
  s.T = static_cast<int64_t>(betas.size());
  double prod = 1.0;
  for (size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0 && betas[i] < 1)) throw ConfigError("diffusion: betas must lie in (0, 1)");
    if (i > 0 && betas[i] < betas[i - 1]) throw ConfigError("diffusion: betas must be nondecreasing");
    prod *= 1.0 - betas[i];
    s.alphas_cumprod.push_back(prod);
  }
  s.betas = std::move(betas);
  return s;
}

Tensor q_sample(const Tensor& z0, int64_t t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw ContractError("q_sample: t=" + std::to_string(t) + " outside [1, T]");
  if (z0.shape() != eps.shape()) throw ContractError("q_sample: z0/eps shape mismatch");
  const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(z0.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

int64_t cubic_timestep(double t, int64_t T) {
  const double td = static_cast<double>(T);
  const double r = t / td;
  return std::clamp<int64_t>(static_cast<int64_t>(std::llround((1.0 - r * r * r) * td)), 1, T);
}

int64_t sample_timestep_cubic(Rng& rng, int64_t T) {
  if (T < 1) throw ConfigError("sample_timestep_cubic: T must be >= 1");
  return cubic_timestep(rng.uniform(1.0, static_cast<double>(T)), T);
}

Tensor reverse_step(const Tensor& z_t, int64_t t, int64_t prev, const Tensor& eps_pred, const Tensor* noise,
                    const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw ContractError("reverse step: t=" + std::to_string(t) + " outside [1, T]");
  if (prev < 0 || prev >= t) throw ContractError("reverse step: previous timestep must lie in [0, t)");
  if (z_t.size() != eps_pred.size()) throw ContractError("reverse step: eps shape mismatch");
  const double alpha_eff = prev == t - 1 ? 1.0 - sched.beta(t) : sched.alpha_bar(t) / sched.alpha_bar(prev);
  const double beta_eff = 1.0 - alpha_eff;
  const double c_eps = beta_eff / std::sqrt(1.0 - sched.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(alpha_eff);
  const bool add_noise = prev > 0 && noise != nullptr;
  if (add_noise && noise->size() != z_t.size()) throw ContractError("reverse step: noise shape mismatch");
  const double sigma = std::sqrt(beta_eff);
  Tensor out(z_t.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = inv * (z_t[i] - c_eps * eps_pred[i]);
    if (add_noise) out[i] += sigma * (*noise)[i];
  }
  return out;
}

Tensor implicit_step(const Tensor& z_t, int64_t t, int64_t prev, const Tensor& eps_pred, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw ContractError("implicit step: t=" + std::to_string(t) + " outside [1, T]");
  if (prev < 0 || prev >= t) throw ContractError("implicit step: previous timestep must lie in [0, t)");
  if (z_t.size() != eps_pred.size()) throw ContractError("implicit step: eps shape mismatch");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(prev);
  const double sa = std::sqrt(ab), so = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev), so_prev = std::sqrt(1.0 - ab_prev);
  Tensor out(z_t.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    const double z0 = (z_t[i] - so * eps_pred[i]) / sa;
    out[i] = sa_prev * z0 + so_prev * eps_pred[i];
  }
  return out;
}

Tensor ddpm_step(const Tensor& z_t, int64_t t, const Tensor& eps_pred, Rng& rng, const NoiseSchedule& sched) {
  if (t < 1) throw ContractError("ddpm_step: t must be >= 1");
  if (t == 1) return reverse_step(z_t, t, 0, eps_pred, nullptr, sched);
  Tensor noise(z_t.shape());
  fill_normal(noise, rng);
  return reverse_step(z_t, t, t - 1, eps_pred, &noise, sched);
}

Tensor cfg_predict(const EpsFn& eps, const Tensor& z_t, int64_t t, double w) {
  if (w == 1.0) return eps(z_t, t, true);
  Tensor uncond = eps(z_t, t, false);
  if (w == 0.0) return uncond;
  Tensor cond = eps(z_t, t, true);
  for (size_t i = 0; i < uncond.size(); ++i) uncond[i] += w * (cond[i] - uncond[i]);
  return uncond;
}

std::vector<int64_t> strided_timesteps(int64_t T, int64_t tau) {
  if (tau < 1 || tau > T) throw ConfigError("sampling steps must lie in [1, " + std::to_string(T) + "]");
  std::vector<int64_t> ts;
  for (int64_t i = tau; i >= 1; --i) {
    ts.push_back(static_cast<int64_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(tau))));
  }
  return ts;
}

Tensor sample_features(const EpsFn& eps, int64_t batch, int64_t dim, const SamplerConfig& cfg, std::vector<Rng>& rngs,
                       const NoiseSchedule& sched) {
  if (static_cast<int64_t>(rngs.size()) != batch) throw ContractError("sample_features: need one rng per row");
  const auto ts = strided_timesteps(sched.T, cfg.steps);
  Tensor z({batch, dim});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t d = 0; d < dim; ++d) z.at(b, d) = rngs[static_cast<size_t>(b)].normal();
  Tensor noise({batch, dim});
  for (size_t i = 0; i < ts.size(); ++i) {
    const int64_t t = ts[i];
    const int64_t prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Tensor e = cfg_predict(eps, z, t, cfg.guidance);
    const bool draw = prev > 0 && cfg.stochastic && !cfg.implicit;
    if (draw)
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t d = 0; d < dim; ++d) noise.at(b, d) = rngs[static_cast<size_t>(b)].normal();
    z = cfg.implicit ? implicit_step(z, t, prev, e, sched) : reverse_step(z, t, prev, e, draw ? &noise : nullptr, sched);
  }
  return z;
}

}  // namespace sdreid::diffusion
