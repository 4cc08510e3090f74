#include "sdreid/augment.hpp"

#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::data {

Tensor hflip(const Tensor& img) {
  const int64_t h = img.dim(0), w = img.dim(1);
  Tensor out(img.shape());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) out[((y * w) + x) * 3 + c] = img[((y * w) + (w - 1 - x)) * 3 + c];
  return out;
}

Tensor pad_crop(const Tensor& img, int64_t pad, Rng& rng) {
  if (pad <= 0) return img;
  const int64_t h = img.dim(0), w = img.dim(1);
  const int64_t oy = rng.uniform_int(0, 2 * pad), ox = rng.uniform_int(0, 2 * pad);
  Tensor out(img.shape(), 0.0);
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = y + oy - pad;
    if (sy < 0 || sy >= h) continue;
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = x + ox - pad;
      if (sx < 0 || sx >= w) continue;
      for (int64_t c = 0; c < 3; ++c) out[((y * w) + x) * 3 + c] = img[((sy * w) + sx) * 3 + c];
    }
  }
  return out;
}

Tensor random_erasing(const Tensor& img, double p, Rng& rng) {
  if (!rng.bernoulli(p)) return img;
  const int64_t h = img.dim(0), w = img.dim(1);
  const double area = static_cast<double>(h * w);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = rng.uniform(0.02, 0.4) * area;
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const auto eh = static_cast<int64_t>(std::lround(std::sqrt(target * aspect)));
    const auto ew = static_cast<int64_t>(std::lround(std::sqrt(target / aspect)));
    if (eh < 1 || ew < 1 || eh >= h || ew >= w) continue;
    const int64_t y0 = rng.uniform_int(0, h - eh), x0 = rng.uniform_int(0, w - ew);
    Tensor out = img;
    for (int64_t y = y0; y < y0 + eh; ++y)
      for (int64_t x = x0; x < x0 + ew; ++x)
        for (int64_t c = 0; c < 3; ++c) out[((y * w) + x) * 3 + c] = rng.uniform();
    return out;
  }
  return img;
}

Tensor augment(const Tensor& img, const AugmentConfig& cfg, Rng& rng) {
  Tensor out = rng.bernoulli(cfg.flip_prob) ? hflip(img) : img;
  out = pad_crop(out, cfg.pad, rng);
  if (cfg.erase_prob > 0) out = random_erasing(out, cfg.erase_prob, rng);
  return out;
}

Tensor augment_batch(const Tensor& batch, const AugmentConfig& cfg, Rng& rng) {
  if (batch.ndim() != 4) throw ContractError("augment_batch: expected [B, H, W, 3]");
  const int64_t b = batch.dim(0), per = batch.dim(1) * batch.dim(2) * batch.dim(3);
  Tensor out(batch.shape());
  for (int64_t i = 0; i < b; ++i) {
    Tensor img({batch.dim(1), batch.dim(2), batch.dim(3)},
               std::vector<double>(batch.data() + i * per, batch.data() + (i + 1) * per));
    const Tensor a = augment(img, cfg, rng);
    std::copy(a.data(), a.data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace sdreid::data
