#pragma once

#include <cstdint>
#include <vector>

#include "sdreid/autograd.hpp"

namespace sdreid::loss {

/// Mean over rows of -sum_k q_k log softmax(logits)_k, q = (1-eps) onehot + eps/K.
ag::Var label_smoothing_ce(const ag::Var& logits, const std::vector<int64_t>& labels, double epsilon);

/// Plain two-way cross-entropy on view logits [B, 2]; labels are 0 (aerial) / 1 (ground).
ag::Var view_ce(const ag::Var& view_logits, const std::vector<int64_t>& view_labels);

/// Batch-hard triplet on Euclidean distances. Every label must occur at
/// least twice in the batch.
ag::Var batch_hard_triplet(const ag::Var& features, const std::vector<int64_t>& labels, double margin);

/// Mean squared elementwise difference.
ag::Var diffusion_mse(const Tensor& eps_true, const ag::Var& eps_pred);

struct Stage1LossReport {
  double l_id = 0;
  double l_tri = 0;
  double l_view = 0;
  double l_total = 0;
};

struct Stage1Loss {
  ag::Var total;
  Stage1LossReport report;
};

struct Stage1LossConfig {
  double smoothing = 0.1;
  double margin = 0.3;
  bool use_view_loss = true;
};

/// L_ID + L_Tri + L_View with unit weights. view_logits may be undefined,
/// in which case the view term is zero.
Stage1Loss stage1_loss(const ag::Var& id_logits, const ag::Var& final_class, const ag::Var& view_logits,
                       const std::vector<int64_t>& labels, const std::vector<int64_t>& view_labels,
                       const Stage1LossConfig& cfg = {});

}  // namespace sdreid::loss
