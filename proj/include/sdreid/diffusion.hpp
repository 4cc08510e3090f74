#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sdreid/rng.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::diffusion {

/// Timesteps are 1-based: beta(1) .. beta(T); alpha_bar(0) = 1.
struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;

  double beta(int64_t t) const { return betas.at(static_cast<size_t>(t - 1)); }
  double alpha_bar(int64_t t) const { return t == 0 ? 1.0 : alphas_cumprod.at(static_cast<size_t>(t - 1)); }
};

/// Linear betas from beta_start to beta_end.
NoiseSchedule make_schedule(int64_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
/// Arbitrary nondecreasing betas in (0, 1).
NoiseSchedule make_schedule_from_betas(std::vector<double> betas);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t in [1, T].
Tensor q_sample(const Tensor& z0, int64_t t, const Tensor& eps, const NoiseSchedule& sched);

/// The cubic map of a continuous t in [1, T]: round((1 - (t/T)^3) T)
/// clamped to [1, T].
int64_t cubic_timestep(double t, int64_t T);

/// Uniform t on [1, T] mapped through (1 - (t/T)^3) T, rounded, clamped to [1, T].
int64_t sample_timestep_cubic(Rng& rng, int64_t T);

/// One reverse step from t to prev < t with the posterior variance of the
/// effective beta; `noise` is ignored when prev == 0 or when null.
Tensor reverse_step(const Tensor& z_t, int64_t t, int64_t prev, const Tensor& eps_pred, const Tensor* noise,
                    const NoiseSchedule& sched);

/// Deterministic (eta = 0) step: predict z_0 from eps, then re-noise it to
/// prev with the same eps. Exact eps reproduces q_sample(z_0, prev, eps).
Tensor implicit_step(const Tensor& z_t, int64_t t, int64_t prev, const Tensor& eps_pred, const NoiseSchedule& sched);

/// Standard DDPM step t -> t-1; noise is drawn from rng only when t > 1.
Tensor ddpm_step(const Tensor& z_t, int64_t t, const Tensor& eps_pred, Rng& rng, const NoiseSchedule& sched);

/// Noise predictor over a batch z [B, D] at a shared timestep; `conditional`
/// false selects the null condition.
using EpsFn = std::function<Tensor(const Tensor& z, int64_t t, bool conditional)>;

/// eps(null) + w (eps(c) - eps(null)); w == 1 and w == 0 evaluate one branch only.
Tensor cfg_predict(const EpsFn& eps, const Tensor& z_t, int64_t t, double w);

/// Descending strided timesteps round(i T / tau), i = tau..1.
std::vector<int64_t> strided_timesteps(int64_t T, int64_t tau);

struct SamplerConfig {
  int64_t steps = 5;
  double guidance = 2.0;
  /// false drops the per-step noise of reverse_step.
  bool stochastic = true;
  /// Use implicit_step instead of reverse_step (stochastic is then ignored).
  bool implicit = false;
};

/// Guided strided sampling from z_T ~ N(0, I). Row b draws all of its noise
/// from rngs[b], so a row's result does not depend on its batch neighbours.
Tensor sample_features(const EpsFn& eps, int64_t batch, int64_t dim, const SamplerConfig& cfg, std::vector<Rng>& rngs,
                       const NoiseSchedule& sched);

}  // namespace sdreid::diffusion
