#include <doctest.h>

#include <cmath>

#include <omp.h>

#include "sdreid/kernels.hpp"
#include "test_util.hpp"

using namespace sdreid;
using namespace testutil;

namespace {

// Naive per-head attention, written independently of the fused kernel.
Tensor naive_attention(const kernels::AttentionShape& s, const Tensor& q, const Tensor& k, const Tensor& v) {
  const int64_t w = s.heads * s.head_dim;
  Tensor out({s.batch * s.sq, w});
  for (int64_t b = 0; b < s.batch; ++b)
    for (int64_t h = 0; h < s.heads; ++h)
      for (int64_t i = 0; i < s.sq; ++i) {
        std::vector<double> logits(static_cast<size_t>(s.sk));
        for (int64_t j = 0; j < s.sk; ++j) {
          double dot = 0;
          for (int64_t d = 0; d < s.head_dim; ++d)
            dot += q.at(b * s.sq + i, h * s.head_dim + d) * k.at(b * s.sk + j, h * s.head_dim + d);
          logits[static_cast<size_t>(j)] = dot * s.scale;
        }
        double mx = logits[0], z = 0;
        for (double l : logits) mx = std::max(mx, l);
        for (double& l : logits) z += (l = std::exp(l - mx));
        for (int64_t d = 0; d < s.head_dim; ++d) {
          double acc = 0;
          for (int64_t j = 0; j < s.sk; ++j) acc += logits[static_cast<size_t>(j)] / z * v.at(b * s.sk + j, h * s.head_dim + d);
          out.at(b * s.sq + i, h * s.head_dim + d) = acc;
        }
      }
  return out;
}

double get(const Tensor& t, bool trans, int64_t r, int64_t c, int64_t rows, int64_t cols) {
  return trans ? t[static_cast<size_t>(c * rows + r)] : t[static_cast<size_t>(r * cols + c)];
}

}  // namespace

TEST_CASE("gemm matches a triple loop for every transpose combination") {
  Rng rng(10);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const int64_t m = 37, n = 29, k = 41;
      const Tensor a = randn({m * k}, rng), b = randn({k * n}, rng);
      Tensor c({m * n}), cs({m * n});
      kernels::GemmShape s{m, n, k, ta, tb};
      kernels::gemm(s, a.span(), b.span(), c.span());
      kernels::serial::gemm(s, a.span(), b.span(), cs.span());
      double err = 0;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          double ref = 0;
          for (int64_t p = 0; p < k; ++p) ref += get(a, ta, i, p, m, k) * get(b, tb, p, j, k, n);
          err = std::max(err, std::abs(ref - c[static_cast<size_t>(i * n + j)]));
        }
      CHECK(err < 1e-10);
      CHECK(max_abs_diff(c, cs) < 1e-12);
    }
}

TEST_CASE("gemm accumulates when asked") {
  Rng rng(11);
  const Tensor a = randn({6}, rng), b = randn({6}, rng);
  Tensor c({4}, 1.0);
  kernels::gemm({2, 2, 3}, a.span(), b.span(), c.span(), true);
  Tensor d({4}, 0.0);
  kernels::gemm({2, 2, 3}, a.span(), b.span(), d.span(), false);
  for (size_t i = 0; i < 4; ++i) CHECK(c[i] == doctest::Approx(d[i] + 1.0).epsilon(1e-14));
}

TEST_CASE("large gemm: parallel and serial results agree") {
  Rng rng(12);
  const int64_t m = 200, n = 150, k = 120;
  const Tensor a = randn({m * k}, rng), b = randn({k * n}, rng);
  Tensor c({m * n}), cs({m * n});
  kernels::gemm({m, n, k}, a.span(), b.span(), c.span());
  kernels::serial::gemm({m, n, k}, a.span(), b.span(), cs.span());
  CHECK(max_abs_diff(c, cs) < 1e-11);
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  Rng rng(18);
  const int64_t m = 256, n = 192, k = 128;
  const Tensor a = randn({m * k}, rng), b = randn({k * n}, rng);
  kernels::AttentionShape s{8, 17, 17, 4, 16, 0.25};
  const Tensor q = randn({8 * 17, 64}, rng), kk = randn({8 * 17, 64}, rng), v = randn({8 * 17, 64}, rng);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    Tensor c({m * n}), d({m * m}), out({8 * 17, 64}), probs({8 * 4 * 17 * 17});
    kernels::gemm({m, n, k}, a.span(), b.span(), c.span());
    kernels::pairwise_distances(a.span(), m, a.span(), m, k, d.span());
    kernels::attention_forward(s, q.span(), kk.span(), v.span(), out.span(), probs.span());
    return std::vector<Tensor>{c, d, out, probs};
  };
  const int before = omp_get_max_threads();
  const auto one = run(1), four = run(4);
  omp_set_num_threads(before);
  for (size_t i = 0; i < one.size(); ++i) CHECK(one[i] == four[i]);
}

TEST_CASE("pairwise distances match a double loop") {
  Rng rng(13);
  const int64_t m = 50, n = 70, d = 9;
  const Tensor x = randn({m * d}, rng), y = randn({n * d}, rng);
  Tensor out({m * n}), outs({m * n});
  kernels::pairwise_distances(x.span(), m, y.span(), n, d, out.span());
  kernels::serial::pairwise_distances(x.span(), m, y.span(), n, d, outs.span());
  double err = 0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (int64_t p = 0; p < d; ++p) s += (x[i * d + p] - y[j * d + p]) * (x[i * d + p] - y[j * d + p]);
      err = std::max(err, std::abs(std::sqrt(s) - out[static_cast<size_t>(i * n + j)]));
    }
  CHECK(err < 1e-12);
  CHECK(max_abs_diff(out, outs) < 1e-12);
}

TEST_CASE("fused attention matches the naive per-head oracle") {
  Rng rng(14);
  kernels::AttentionShape s{3, 5, 7, 4, 6, 1.0 / std::sqrt(6.0)};
  const int64_t w = s.heads * s.head_dim;
  const Tensor q = randn({s.batch * s.sq, w}, rng), k = randn({s.batch * s.sk, w}, rng), v = randn({s.batch * s.sk, w}, rng);
  Tensor out({s.batch * s.sq, w}), probs({s.batch * s.heads * s.sq * s.sk});
  kernels::attention_forward(s, q.span(), k.span(), v.span(), out.span(), probs.span());
  CHECK(max_rel_diff(out, naive_attention(s, q, k, v)) < 1e-5);
  Tensor out_s(out.shape()), probs_s(probs.shape());
  kernels::serial::attention_forward(s, q.span(), k.span(), v.span(), out_s.span(), probs_s.span());
  CHECK(max_abs_diff(out, out_s) < 1e-12);
  CHECK(max_abs_diff(probs, probs_s) < 1e-12);
}

TEST_CASE("attention over a single key has weight exactly one") {
  Rng rng(15);
  kernels::AttentionShape s{2, 3, 1, 1, 4, 0.5};
  const Tensor q = randn({6, 4}, rng), k = randn({2, 4}, rng), v = randn({2, 4}, rng);
  Tensor out({6, 4}), probs({6});
  kernels::attention_forward(s, q.span(), k.span(), v.span(), out.span(), probs.span());
  for (size_t i = 0; i < probs.size(); ++i) CHECK(probs[i] == 1.0);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t d = 0; d < 4; ++d) CHECK(out.at(i, d) == v.at(0, d));
}

TEST_CASE("attention backward: parallel and serial agree") {
  Rng rng(16);
  kernels::AttentionShape s{4, 6, 6, 2, 5, 0.3};
  const int64_t w = 10;
  const Tensor q = randn({24, w}, rng), k = randn({24, w}, rng), v = randn({24, w}, rng), dout = randn({24, w}, rng);
  Tensor out({24, w}), probs({4 * 2 * 36});
  kernels::attention_forward(s, q.span(), k.span(), v.span(), out.span(), probs.span());
  Tensor dq({24, w}), dk({24, w}), dv({24, w}), dq2({24, w}), dk2({24, w}), dv2({24, w});
  kernels::attention_backward(s, q.span(), k.span(), v.span(), probs.span(), dout.span(), dq.span(), dk.span(), dv.span());
  kernels::serial::attention_backward(s, q.span(), k.span(), v.span(), probs.span(), dout.span(), dq2.span(), dk2.span(),
                                      dv2.span());
  CHECK(max_abs_diff(dq, dq2) < 1e-12);
  CHECK(max_abs_diff(dk, dk2) < 1e-12);
  CHECK(max_abs_diff(dv, dv2) < 1e-12);
}

TEST_CASE("col2im is the adjoint of im2col") {
  Rng rng(17);
  for (int64_t stride : {1, 2}) {
    kernels::ConvGeometry g{2, 3, 5, 6, 3, stride, 1};
    const int64_t rows = g.channels * g.kernel * g.kernel, cols = g.batch * g.out_height() * g.out_width();
    const Tensor x = randn({g.batch * g.channels * g.height * g.width}, rng), c = randn({rows * cols}, rng);
    Tensor col({rows * cols}), dx({x.size() ? static_cast<int64_t>(x.size()) : 0}, 0.0);
    kernels::im2col(g, x.span(), col.span());
    kernels::col2im(g, c.span(), dx.span());
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < col.size(); ++i) lhs += col[i] * c[i];
    for (size_t i = 0; i < x.size(); ++i) rhs += x[i] * dx[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    Tensor col_s({rows * cols});
    kernels::serial::im2col(g, x.span(), col_s.span());
    CHECK(col == col_s);
  }
}
