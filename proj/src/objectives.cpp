#include "sdreid/objectives.hpp"

#include <cmath>
#include <map>

#include "sdreid/errors.hpp"

namespace sdreid::loss {

using ag::Var;

Var label_smoothing_ce(const Var& logits, const std::vector<int64_t>& labels, double epsilon) {
  const Tensor& z = logits.value();
  if (z.ndim() != 2) throw ContractError("label_smoothing_ce: logits must be 2-d");
  const int64_t b = z.dim(0), k = z.dim(1);
  if (static_cast<int64_t>(labels.size()) != b) throw ContractError("label_smoothing_ce: label count mismatch");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ContractError("label_smoothing_ce: epsilon must lie in [0, 1)");
  for (int64_t y : labels)
    if (y < 0 || y >= k) throw ContractError("label_smoothing_ce: label " + std::to_string(y) + " out of range");
  if (b == 0) return ag::constant(Tensor::scalar(0.0));

  Tensor probs({b, k});
  double total = 0;
  for (int64_t i = 0; i < b; ++i) {
    const double* row = z.data() + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double s = 0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (int64_t j = 0; j < k; ++j) {
      const double logp = row[j] - lse;
      probs.at(i, j) = std::exp(logp);
      const double q = (j == labels[i] ? 1.0 - epsilon : 0.0) + epsilon / static_cast<double>(k);
      total -= q * logp;
    }
  }
  return ag::make_result(Tensor::scalar(total / static_cast<double>(b)), {logits},
                         [probs, labels, epsilon, b, k](ag::Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           const double s = self.grad[0] / static_cast<double>(b);
                           for (int64_t i = 0; i < b; ++i)
                             for (int64_t j = 0; j < k; ++j) {
                               const double q =
                                   (j == labels[i] ? 1.0 - epsilon : 0.0) + epsilon / static_cast<double>(k);
                               g[i * k + j] += s * (probs.at(i, j) - q);
                             }
                         });
}

Var view_ce(const Var& view_logits, const std::vector<int64_t>& view_labels) {
  if (view_logits.value().ndim() != 2 || view_logits.dim(1) != 2) throw ContractError("view_ce: logits must be [B, 2]");
  return label_smoothing_ce(view_logits, view_labels, 0.0);
}

Var batch_hard_triplet(const Var& features, const std::vector<int64_t>& labels, double margin) {
  const Tensor& x = features.value();
  if (x.ndim() != 2) throw ContractError("batch_hard_triplet: features must be 2-d");
  const int64_t b = x.dim(0), c = x.dim(1);
  if (static_cast<int64_t>(labels.size()) != b) throw ContractError("batch_hard_triplet: label count mismatch");
  std::map<int64_t, int> counts;
  for (int64_t y : labels) ++counts[y];
  for (const auto& [y, n] : counts)
    if (n < 2) throw ContractError("batch_hard_triplet: identity " + std::to_string(y) + " has a single instance");
  if (b == 0) return ag::constant(Tensor::scalar(0.0));

  // A tiny floor inside the root keeps the gradient finite for coincident points.
  constexpr double kFloor = 1e-12;
  std::vector<double> dist(static_cast<size_t>(b * b));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < b; ++j) {
      double s = 0;
      for (int64_t d = 0; d < c; ++d) {
        const double diff = x.at(i, d) - x.at(j, d);
        s += diff * diff;
      }
      dist[static_cast<size_t>(i * b + j)] = std::sqrt(s + kFloor);
    }

  struct Pick {
    int64_t pos, neg;
    bool active;
  };
  std::vector<Pick> picks(static_cast<size_t>(b));
  double total = 0;
  for (int64_t i = 0; i < b; ++i) {
    int64_t pos = -1, neg = -1;
    for (int64_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double d = dist[static_cast<size_t>(i * b + j)];
      if (labels[j] == labels[i]) {
        if (pos < 0 || d > dist[static_cast<size_t>(i * b + pos)]) pos = j;
      } else if (neg < 0 || d < dist[static_cast<size_t>(i * b + neg)]) {
        neg = j;
      }
    }
    // Without any negative in the batch the anchor contributes nothing.
    if (neg < 0) {
      picks[static_cast<size_t>(i)] = {pos, neg, false};
      continue;
    }
    const double v = dist[static_cast<size_t>(i * b + pos)] - dist[static_cast<size_t>(i * b + neg)] + margin;
    picks[static_cast<size_t>(i)] = {pos, neg, v > 0};
    if (v > 0) total += v;
  }

  return ag::make_result(
      Tensor::scalar(total / static_cast<double>(b)), {features},
      [picks, dist, b, c](ag::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const Tensor& x = self.inputs[0]->value;
        const double s = self.grad[0] / static_cast<double>(b);
        auto push = [&](int64_t i, int64_t j, double w) {
          const double d = dist[static_cast<size_t>(i * b + j)];
          for (int64_t k = 0; k < c; ++k) {
            const double gk = w * (x.at(i, k) - x.at(j, k)) / d;
            g[i * c + k] += gk;
            g[j * c + k] -= gk;
          }
        };
        for (int64_t i = 0; i < b; ++i) {
          const Pick& p = picks[static_cast<size_t>(i)];
          if (!p.active) continue;
          push(i, p.pos, s);
          push(i, p.neg, -s);
        }
      });
}

Var diffusion_mse(const Tensor& eps_true, const Var& eps_pred) {
  if (eps_true.size() != eps_pred.value().size()) throw ContractError("diffusion_mse: size mismatch");
  const size_t n = eps_true.size();
  if (n == 0) return ag::constant(Tensor::scalar(0.0));
  Tensor diff(eps_pred.shape());
  double s = 0;
  for (size_t i = 0; i < n; ++i) {
    diff[i] = eps_pred.value()[i] - eps_true[i];
    s += diff[i] * diff[i];
  }
  return ag::make_result(Tensor::scalar(s / static_cast<double>(n)), {eps_pred}, [diff, n](ag::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) g[i] += k * diff[i];
  });
}

Stage1Loss stage1_loss(const Var& id_logits, const Var& final_class, const Var& view_logits,
                       const std::vector<int64_t>& labels, const std::vector<int64_t>& view_labels,
                       const Stage1LossConfig& cfg) {
  Stage1Loss out;
  Var l_id = label_smoothing_ce(id_logits, labels, cfg.smoothing);
  Var l_tri = batch_hard_triplet(final_class, labels, cfg.margin);
  out.total = ag::add(l_id, l_tri);
  out.report.l_id = l_id.value().item();
  out.report.l_tri = l_tri.value().item();
  if (cfg.use_view_loss && view_logits.defined()) {
    Var l_view = view_ce(view_logits, view_labels);
    out.total = ag::add(out.total, l_view);
    out.report.l_view = l_view.value().item();
  }
  out.report.l_total = out.total.value().item();
  return out;
}

}  // namespace sdreid::loss
