#pragma once

#include <cstdint>

#include "sdreid/rng.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::data {

/// Images are [H, W, 3] in [0, 1].
Tensor hflip(const Tensor& img);
/// Zero-pads by `pad` on every side and crops a random H x W window.
Tensor pad_crop(const Tensor& img, int64_t pad, Rng& rng);
/// With probability p, fills a random rectangle (area 2%..40%, aspect
/// 0.3..3.3) with uniform noise.
Tensor random_erasing(const Tensor& img, double p, Rng& rng);

struct AugmentConfig {
  double flip_prob = 0.5;
  int64_t pad = 0;
  double erase_prob = 0.0;
};

Tensor augment(const Tensor& img, const AugmentConfig& cfg, Rng& rng);

/// Applies augment() to every image of a stacked batch [B, H, W, 3].
Tensor augment_batch(const Tensor& batch, const AugmentConfig& cfg, Rng& rng);

}  // namespace sdreid::data
