#include "sdreid/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "sdreid/errors.hpp"

namespace sdreid::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
  if (!cond) throw ContractError(what);
}

void require_shape(const Var& v, size_t ndim, const char* op) {
  if (v.value().ndim() != ndim) {
    throw ContractError(std::string(op) + ": expected " + std::to_string(ndim) + "-d input, got " +
                        shape_str(v.shape()));
  }
}

Tensor& gbuf(const std::shared_ptr<Node>& n) { return n->grad_buffer(); }

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
  double* d = dst.data();
  const double* x = src.data();
  const size_t n = src.size();
  for (size_t i = 0; i < n; ++i) d[i] += s * x[i];
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(n));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  n->inputs.reserve(inputs.size());
  for (auto& in : inputs) n->inputs.push_back(in.node());
  n->backward = std::move(fn);
  return Var(std::move(n));
}

void backward(const Var& root) {
  require(root.defined(), "backward on undefined var");
  require(root.value().size() == 1, "backward requires a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = a.value();
  axpy(out, b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) axpy(gbuf(in), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) axpy(gbuf(self.inputs[0]), self.grad);
    if (self.inputs[1]->requires_grad) axpy(gbuf(self.inputs[1]), self.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (A->requires_grad) {
      auto& g = gbuf(A);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B->value[i];
    }
    if (B->requires_grad) {
      auto& g = gbuf(B);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.span()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) { axpy(gbuf(self.inputs[0]), self.grad, s); });
}

Var reshape(const Var& a, Shape shape) {
  return make_result(a.value().reshaped(std::move(shape)), {a},
                     [](Node& self) { axpy(gbuf(self.inputs[0]), self.grad); });
}

Var detach(const Var& a) { return constant(a.value()); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().span()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    const double go = self.grad[0];
    for (auto& v : g.span()) v += go;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

// ---------------------------------------------------------------- dense

Var matmul(const Var& a, const Var& b) {
  require_shape(a, 2, "matmul");
  require_shape(b, 2, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimension mismatch");
  Tensor out({m, n});
  kernels::gemm({m, n, k, false, false}, a.value().span(), b.value().span(), out.span());
  return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (A->requires_grad) kernels::gemm({m, k, n, false, true}, self.grad.span(), B->value.span(), gbuf(A).span(), true);
    if (B->requires_grad) kernels::gemm({k, n, m, true, false}, A->value.span(), self.grad.span(), gbuf(B).span(), true);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_shape(x, 2, "linear");
  require_shape(w, 2, "linear");
  const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw ContractError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  Tensor out({m, n});
  kernels::gemm({m, n, k, false, false}, x.value().span(), w.value().span(), out.span());
  const bool has_bias = b.defined();
  if (has_bias) {
    require(static_cast<int64_t>(b.value().size()) == n, "linear: bias size mismatch");
    const double* bv = b.value().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  std::vector<Var> ins{x, w};
  if (has_bias) ins.push_back(b);
  return make_result(std::move(out), std::move(ins), [m, n, k, has_bias](Node& self) {
    auto& X = self.inputs[0];
    auto& W = self.inputs[1];
    if (X->requires_grad) kernels::gemm({m, k, n, false, true}, self.grad.span(), W->value.span(), gbuf(X).span(), true);
    if (W->requires_grad) kernels::gemm({k, n, m, true, false}, X->value.span(), self.grad.span(), gbuf(W).span(), true);
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& g = gbuf(self.inputs[2]);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.span()) v = 0.5 * v * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
  return make_result(std::move(out), {x}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = gbuf(self.inputs[0]);
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.span()) v = v / (1.0 + std::exp(-v));
  return make_result(std::move(out), {x}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = gbuf(self.inputs[0]);
    for (size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      g[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

// ---------------------------------------------------------------- normalization

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_shape(x, 2, "layer_norm");
  const int64_t m = x.dim(0), c = x.dim(1);
  require(static_cast<int64_t>(gamma.value().size()) == c && static_cast<int64_t>(beta.value().size()) == c,
          "layer_norm: affine size mismatch");
  Tensor xhat({m, c});
  Tensor out({m, c});
  std::vector<double> inv_std(static_cast<size_t>(m));
  const double* xv = x.value().data();
  for (int64_t i = 0; i < m; ++i) {
    const double* row = xv + i * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int64_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [m, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& X = self.inputs[0];
                       auto& G = self.inputs[1];
                       auto& B = self.inputs[2];
                       const double* gv = G->value.data();
                       if (G->requires_grad || B->requires_grad) {
                         auto& gg = gbuf(G);
                         auto& gb = gbuf(B);
                         for (int64_t i = 0; i < m; ++i)
                           for (int64_t j = 0; j < c; ++j) {
                             gg[j] += self.grad[i * c + j] * xhat[i * c + j];
                             gb[j] += self.grad[i * c + j];
                           }
                       }
                       if (!X->requires_grad) return;
                       auto& gx = gbuf(X);
                       for (int64_t i = 0; i < m; ++i) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t j = 0; j < c; ++j) {
                           const double dh = self.grad[i * c + j] * gv[j];
                           m1 += dh;
                           m2 += dh * xhat[i * c + j];
                         }
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (int64_t j = 0; j < c; ++j) {
                           const double dh = self.grad[i * c + j] * gv[j];
                           gx[i * c + j] += inv_std[i] * (dh - m1 - xhat[i * c + j] * m2);
                         }
                       }
                     });
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, std::vector<double>* batch_mean,
                     std::vector<double>* batch_var) {
  require_shape(x, 2, "batch_norm");
  const int64_t b = x.dim(0), c = x.dim(1);
  require(b >= 2, "batch_norm_train: needs at least two samples");
  Tensor xhat({b, c});
  Tensor out({b, c});
  std::vector<double> mu(static_cast<size_t>(c), 0.0), var(static_cast<size_t>(c), 0.0), inv_std(static_cast<size_t>(c));
  const auto& xv = x.value();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
  for (auto& v : mu) v /= static_cast<double>(b);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) var[j] += (xv[i * c + j] - mu[j]) * (xv[i * c + j] - mu[j]);
  for (auto& v : var) v /= static_cast<double>(b);
  for (int64_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      const double h = (xv[i * c + j] - mu[j]) * inv_std[j];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return make_result(std::move(out), {x, gamma, beta},
                     [b, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& X = self.inputs[0];
                       auto& G = self.inputs[1];
                       auto& B = self.inputs[2];
                       if (G->requires_grad || B->requires_grad) {
                         auto& gg = gbuf(G);
                         auto& gb = gbuf(B);
                         for (int64_t i = 0; i < b; ++i)
                           for (int64_t j = 0; j < c; ++j) {
                             gg[j] += self.grad[i * c + j] * xhat[i * c + j];
                             gb[j] += self.grad[i * c + j];
                           }
                       }
                       if (!X->requires_grad) return;
                       auto& gx = gbuf(X);
                       const double* gv = G->value.data();
                       for (int64_t j = 0; j < c; ++j) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t i = 0; i < b; ++i) {
                           const double dh = self.grad[i * c + j] * gv[j];
                           m1 += dh;
                           m2 += dh * xhat[i * c + j];
                         }
                         m1 /= static_cast<double>(b);
                         m2 /= static_cast<double>(b);
                         for (int64_t i = 0; i < b; ++i) {
                           const double dh = self.grad[i * c + j] * gv[j];
                           gx[i * c + j] += inv_std[j] * (dh - m1 - xhat[i * c + j] * m2);
                         }
                       }
                     });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const std::vector<double>& mean,
                    const std::vector<double>& var, double eps) {
  require_shape(x, 2, "batch_norm");
  const int64_t b = x.dim(0), c = x.dim(1);
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int64_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Tensor xhat({b, c});
  Tensor out({b, c});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      const double h = (x.value()[i * c + j] - mean[j]) * inv_std[j];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  return make_result(std::move(out), {x, gamma, beta},
                     [b, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& X = self.inputs[0];
                       auto& G = self.inputs[1];
                       auto& B = self.inputs[2];
                       for (int64_t i = 0; i < b; ++i)
                         for (int64_t j = 0; j < c; ++j) {
                           const double go = self.grad[i * c + j];
                           if (G->requires_grad) gbuf(G)[j] += go * xhat[i * c + j];
                           if (B->requires_grad) gbuf(B)[j] += go;
                           if (X->requires_grad) gbuf(X)[i * c + j] += go * G->value[j] * inv_std[j];
                         }
                     });
}

Var group_norm(const Var& x, int64_t groups, const Var& gamma, const Var& beta, double eps) {
  require_shape(x, 4, "group_norm");
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
  const int64_t cg = c / groups;
  const int64_t len = cg * hw;
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(b * groups));
  const double* xv = x.value().data();
  for (int64_t n = 0; n < b; ++n) {
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (n * c + g * cg) * hw;
      double mu = 0.0;
      for (int64_t e = 0; e < len; ++e) mu += xv[base + e];
      mu /= static_cast<double>(len);
      double var = 0.0;
      for (int64_t e = 0; e < len; ++e) var += (xv[base + e] - mu) * (xv[base + e] - mu);
      var /= static_cast<double>(len);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[n * groups + g] = is;
      for (int64_t e = 0; e < len; ++e) {
        const int64_t ch = g * cg + e / hw;
        const double h = (xv[base + e] - mu) * is;
        xhat[base + e] = h;
        out[base + e] = h * gamma.value()[ch] + beta.value()[ch];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [b, c, hw, groups, cg, len, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& X = self.inputs[0];
                       auto& G = self.inputs[1];
                       auto& B = self.inputs[2];
                       const double* gv = G->value.data();
                       if (G->requires_grad || B->requires_grad) {
                         auto& gg = gbuf(G);
                         auto& gb = gbuf(B);
                         for (int64_t n = 0; n < b; ++n)
                           for (int64_t ch = 0; ch < c; ++ch)
                             for (int64_t p = 0; p < hw; ++p) {
                               const int64_t idx = (n * c + ch) * hw + p;
                               gg[ch] += self.grad[idx] * xhat[idx];
                               gb[ch] += self.grad[idx];
                             }
                       }
                       if (!X->requires_grad) return;
                       auto& gx = gbuf(X);
                       for (int64_t n = 0; n < b; ++n) {
                         for (int64_t g = 0; g < groups; ++g) {
                           const int64_t base = (n * c + g * cg) * hw;
                           double m1 = 0.0, m2 = 0.0;
                           for (int64_t e = 0; e < len; ++e) {
                             const double dh = self.grad[base + e] * gv[g * cg + e / hw];
                             m1 += dh;
                             m2 += dh * xhat[base + e];
                           }
                           m1 /= static_cast<double>(len);
                           m2 /= static_cast<double>(len);
                           const double is = inv_std[n * groups + g];
                           for (int64_t e = 0; e < len; ++e) {
                             const double dh = self.grad[base + e] * gv[g * cg + e / hw];
                             gx[base + e] += is * (dh - m1 - xhat[base + e] * m2);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------- attention

Var attention(const Var& q, const Var& k, const Var& v, const kernels::AttentionShape& s) {
  const int64_t width = s.heads * s.head_dim;
  require(q.value().size() == static_cast<size_t>(s.batch * s.sq * width), "attention: q shape mismatch");
  require(k.value().size() == static_cast<size_t>(s.batch * s.sk * width), "attention: k shape mismatch");
  require(v.value().size() == static_cast<size_t>(s.batch * s.sk * width), "attention: v shape mismatch");
  Tensor out({s.batch * s.sq, width});
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(s.batch * s.heads * s.sq * s.sk));
  kernels::attention_forward(s, q.value().span(), k.value().span(), v.value().span(), out.span(), *probs);
  return make_result(std::move(out), {q, k, v}, [s, probs](Node& self) {
    auto& Q = self.inputs[0];
    auto& K = self.inputs[1];
    auto& V = self.inputs[2];
    // The kernel writes all three gradients; route unused ones to scratch.
    Tensor scratch_q, scratch_k, scratch_v;
    std::span<double> dq, dk, dv;
    if (Q->requires_grad) dq = gbuf(Q).span();
    else { scratch_q = Tensor(Q->value.shape()); dq = scratch_q.span(); }
    if (K->requires_grad) dk = gbuf(K).span();
    else { scratch_k = Tensor(K->value.shape()); dk = scratch_k.span(); }
    if (V->requires_grad) dv = gbuf(V).span();
    else { scratch_v = Tensor(V->value.shape()); dv = scratch_v.span(); }
    kernels::attention_backward(s, Q->value.span(), K->value.span(), V->value.span(), *probs, self.grad.span(), dq, dk,
                                dv);
  });
}

// ---------------------------------------------------------------- sequences

Var slice_cols(const Var& x, int64_t begin, int64_t end) {
  require_shape(x, 2, "slice_cols");
  const int64_t m = x.dim(0), c = x.dim(1), w = end - begin;
  require(begin >= 0 && end <= c && w > 0, "slice_cols: bad range");
  Tensor out({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(x.value().data() + i * c + begin, w, out.data() + i * w);
  return make_result(std::move(out), {x}, [m, c, w, begin](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

Var concat_sequences(const Var& a, int64_t len_a, const Var& b, int64_t len_b, int64_t batch) {
  require_shape(a, 2, "concat_sequences");
  require_shape(b, 2, "concat_sequences");
  const int64_t c = a.dim(1);
  require(b.dim(1) == c && a.dim(0) == batch * len_a && b.dim(0) == batch * len_b, "concat_sequences: shape mismatch");
  const int64_t len = len_a + len_b;
  Tensor out({batch * len, c});
  for (int64_t n = 0; n < batch; ++n) {
    std::copy_n(a.value().data() + n * len_a * c, len_a * c, out.data() + n * len * c);
    std::copy_n(b.value().data() + n * len_b * c, len_b * c, out.data() + (n * len + len_a) * c);
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    for (int64_t n = 0; n < batch; ++n) {
      if (A->requires_grad) {
        auto& g = gbuf(A);
        for (int64_t e = 0; e < len_a * c; ++e) g[n * len_a * c + e] += self.grad[n * len * c + e];
      }
      if (B->requires_grad) {
        auto& g = gbuf(B);
        for (int64_t e = 0; e < len_b * c; ++e) g[n * len_b * c + e] += self.grad[(n * len + len_a) * c + e];
      }
    }
  });
}

Var broadcast_batch(const Var& t, int64_t batch) {
  require_shape(t, 2, "broadcast_batch");
  const int64_t rows = t.dim(0), c = t.dim(1), block = rows * c;
  Tensor out({batch * rows, c});
  for (int64_t n = 0; n < batch; ++n) std::copy_n(t.value().data(), block, out.data() + n * block);
  return make_result(std::move(out), {t}, [batch, block](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t e = 0; e < block; ++e) g[e] += self.grad[n * block + e];
  });
}

Var add_broadcast_batch(const Var& x, const Var& p, int64_t batch) {
  require_shape(x, 2, "add_broadcast_batch");
  const int64_t block = static_cast<int64_t>(p.value().size());
  require(static_cast<int64_t>(x.value().size()) == batch * block, "add_broadcast_batch: shape mismatch");
  Tensor out = x.value();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t e = 0; e < block; ++e) out[n * block + e] += p.value()[e];
  return make_result(std::move(out), {x, p}, [batch, block](Node& self) {
    if (self.inputs[0]->requires_grad) axpy(gbuf(self.inputs[0]), self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = gbuf(self.inputs[1]);
      for (int64_t n = 0; n < batch; ++n)
        for (int64_t e = 0; e < block; ++e) g[e] += self.grad[n * block + e];
    }
  });
}

Var select_position(const Var& x, int64_t batch, int64_t len, int64_t pos) {
  require_shape(x, 2, "select_position");
  const int64_t c = x.dim(1);
  require(x.dim(0) == batch * len && pos >= 0 && pos < len, "select_position: bad position");
  Tensor out({batch, c});
  for (int64_t n = 0; n < batch; ++n) std::copy_n(x.value().data() + (n * len + pos) * c, c, out.data() + n * c);
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t j = 0; j < c; ++j) g[(n * len + pos) * c + j] += self.grad[n * c + j];
  });
}

Var stack_per_sample(const std::vector<Var>& parts) {
  require(!parts.empty(), "stack_per_sample: no parts");
  const int64_t batch = parts[0].dim(0), c = parts[0].dim(1);
  const int64_t k = static_cast<int64_t>(parts.size());
  for (const auto& p : parts) require(p.dim(0) == batch && p.dim(1) == c, "stack_per_sample: shape mismatch");
  Tensor out({batch * k, c});
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t i = 0; i < k; ++i)
      std::copy_n(parts[i].value().data() + n * c, c, out.data() + (n * k + i) * c);
  return make_result(std::move(out), parts, [batch, c, k](Node& self) {
    for (int64_t i = 0; i < k; ++i) {
      auto& in = self.inputs[i];
      if (!in->requires_grad) continue;
      auto& g = gbuf(in);
      for (int64_t n = 0; n < batch; ++n)
        for (int64_t j = 0; j < c; ++j) g[n * c + j] += self.grad[(n * k + i) * c + j];
    }
  });
}

Var replace_samples(const Var& real, const Var& replacement, const std::vector<bool>& use_replacement) {
  const int64_t batch = static_cast<int64_t>(use_replacement.size());
  const int64_t block = static_cast<int64_t>(replacement.value().size());
  require(static_cast<int64_t>(real.value().size()) == batch * block, "replace_samples: shape mismatch");
  Tensor out = real.value();
  for (int64_t n = 0; n < batch; ++n)
    if (use_replacement[n]) std::copy_n(replacement.value().data(), block, out.data() + n * block);
  return make_result(std::move(out), {real, replacement}, [use_replacement, batch, block](Node& self) {
    auto& R = self.inputs[0];
    auto& P = self.inputs[1];
    for (int64_t n = 0; n < batch; ++n) {
      if (use_replacement[n]) {
        if (P->requires_grad) {
          auto& g = gbuf(P);
          for (int64_t e = 0; e < block; ++e) g[e] += self.grad[n * block + e];
        }
      } else if (R->requires_grad) {
        auto& g = gbuf(R);
        for (int64_t e = 0; e < block; ++e) g[n * block + e] += self.grad[n * block + e];
      }
    }
  });
}

// ---------------------------------------------------------------- feature maps

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  require_shape(x, 4, "conv2d");
  require_shape(w, 4, "conv2d");
  const int64_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0), kk = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != kk) {
    throw ContractError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  kernels::ConvGeometry g{batch, cin, x.dim(2), x.dim(3), kk, stride, pad};
  const int64_t oh = g.out_height(), ow = g.out_width(), plane = oh * ow;
  const int64_t rows = cin * kk * kk, cols = batch * plane;
  auto col = std::make_shared<Tensor>(Shape{rows, cols});
  kernels::im2col(g, x.value().span(), col->span());
  Tensor cm({cout, cols});
  kernels::gemm({cout, cols, rows, false, false}, w.value().span(), col->span(), cm.span());
  const bool has_bias = b.defined();
  Tensor out({batch, cout, oh, ow});
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t o = 0; o < cout; ++o) {
      const double bias = has_bias ? b.value()[o] : 0.0;
      for (int64_t p = 0; p < plane; ++p) out[(n * cout + o) * plane + p] = cm[o * cols + n * plane + p] + bias;
    }
  std::vector<Var> ins{x, w};
  if (has_bias) ins.push_back(b);
  return make_result(std::move(out), std::move(ins), [=](Node& self) {
    auto& X = self.inputs[0];
    auto& W = self.inputs[1];
    Tensor dcm({cout, cols});
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t o = 0; o < cout; ++o)
        for (int64_t p = 0; p < plane; ++p) dcm[o * cols + n * plane + p] = self.grad[(n * cout + o) * plane + p];
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& gb = gbuf(self.inputs[2]);
      for (int64_t o = 0; o < cout; ++o) {
        double s = 0.0;
        for (int64_t e = 0; e < cols; ++e) s += dcm[o * cols + e];
        gb[o] += s;
      }
    }
    if (W->requires_grad) kernels::gemm({cout, rows, cols, false, true}, dcm.span(), col->span(), gbuf(W).span(), true);
    if (X->requires_grad) {
      Tensor dcol({rows, cols});
      kernels::gemm({rows, cols, cout, true, false}, W->value.span(), dcm.span(), dcol.span());
      kernels::col2im(g, dcol.span(), gbuf(X).span());
    }
  });
}

Var avg_pool2d(const Var& x, int64_t k) {
  require_shape(x, 4, "avg_pool2d");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(k > 0 && h % k == 0 && w % k == 0, "avg_pool2d: size not divisible by kernel");
  const int64_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({b, c, oh, ow});
  for (int64_t nc = 0; nc < b * c; ++nc)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) out[(nc * oh + y / k) * ow + xx / k] += inv * x.value()[(nc * h + y) * w + xx];
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t nc = 0; nc < b * c; ++nc)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) g[(nc * h + y) * w + xx] += inv * self.grad[(nc * oh + y / k) * ow + xx / k];
  });
}

Var upsample_nearest2x(const Var& x) {
  require_shape(x, 4, "upsample_nearest2x");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({b, c, 2 * h, 2 * w});
  for (int64_t nc = 0; nc < b * c; ++nc)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx) out[(nc * 2 * h + y) * 2 * w + xx] = x.value()[(nc * h + y / 2) * w + xx / 2];
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t nc = 0; nc < b * c; ++nc)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) g[(nc * h + y / 2) * w + xx / 2] += self.grad[(nc * 2 * h + y) * 2 * w + xx];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_shape(a, 4, "concat_channels");
  require_shape(b, 4, "concat_channels");
  const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  require(b.dim(0) == n && b.dim(2) == a.dim(2) && b.dim(3) == a.dim(3), "concat_channels: shape mismatch");
  const int64_t c = ca + cb;
  Tensor out({n, c, a.dim(2), a.dim(3)});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * plane, ca * plane, out.data() + i * c * plane);
    std::copy_n(b.value().data() + i * cb * plane, cb * plane, out.data() + (i * c + ca) * plane);
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    for (int64_t i = 0; i < n; ++i) {
      if (A->requires_grad) {
        auto& g = gbuf(A);
        for (int64_t e = 0; e < ca * plane; ++e) g[i * ca * plane + e] += self.grad[i * c * plane + e];
      }
      if (B->requires_grad) {
        auto& g = gbuf(B);
        for (int64_t e = 0; e < cb * plane; ++e) g[i * cb * plane + e] += self.grad[(i * c + ca) * plane + e];
      }
    }
  });
}

Var add_channel_bias(const Var& x, const Var& e) {
  require_shape(x, 4, "add_channel_bias");
  const int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(static_cast<int64_t>(e.value().size()) == b * c, "add_channel_bias: bias shape mismatch");
  Tensor out = x.value();
  for (int64_t nc = 0; nc < b * c; ++nc)
    for (int64_t p = 0; p < plane; ++p) out[nc * plane + p] += e.value()[nc];
  return make_result(std::move(out), {x, e}, [=](Node& self) {
    if (self.inputs[0]->requires_grad) axpy(gbuf(self.inputs[0]), self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = gbuf(self.inputs[1]);
      for (int64_t nc = 0; nc < b * c; ++nc) {
        double s = 0.0;
        for (int64_t p = 0; p < plane; ++p) s += self.grad[nc * plane + p];
        g[nc] += s;
      }
    }
  });
}

Var nchw_to_tokens(const Var& x) {
  require_shape(x, 4, "nchw_to_tokens");
  const int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out({b * plane, c});
  for (int64_t n = 0; n < b; ++n)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t p = 0; p < plane; ++p) out[(n * plane + p) * c + ch] = x.value()[(n * c + ch) * plane + p];
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t n = 0; n < b; ++n)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < plane; ++p) g[(n * c + ch) * plane + p] += self.grad[(n * plane + p) * c + ch];
  });
}

Var tokens_to_nchw(const Var& t, int64_t batch, int64_t channels, int64_t height, int64_t width) {
  const int64_t plane = height * width;
  require(t.value().size() == static_cast<size_t>(batch * channels * plane), "tokens_to_nchw: shape mismatch");
  Tensor out({batch, channels, height, width});
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t ch = 0; ch < channels; ++ch)
      for (int64_t p = 0; p < plane; ++p) out[(n * channels + ch) * plane + p] = t.value()[(n * plane + p) * channels + ch];
  return make_result(std::move(out), {t}, [=](Node& self) {
    auto& g = gbuf(self.inputs[0]);
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t ch = 0; ch < channels; ++ch)
        for (int64_t p = 0; p < plane; ++p) g[(n * plane + p) * channels + ch] += self.grad[(n * channels + ch) * plane + p];
  });
}

}  // namespace sdreid::ag
