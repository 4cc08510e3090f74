#include <algorithm>
#include <cmath>
#include <vector>

#include "sdreid/kernels.hpp"

namespace sdreid::kernels::serial {

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  for (int64_t i = 0; i < s.m; ++i) {
    for (int64_t j = 0; j < s.n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < s.k; ++p) {
        const double av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
        const double bv = s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
        acc += av * bv;
      }
      c[i * s.n + j] = accumulate ? c[i * s.n + j] + acc : acc;
    }
  }
}

void pairwise_distances(std::span<const double> x, int64_t m, std::span<const double> y, int64_t n, int64_t d,
                        std::span<double> out) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < d; ++p) {
        const double diff = x[i * d + p] - y[j * d + p];
        acc += diff * diff;
      }
      out[i * n + j] = std::sqrt(acc);
    }
  }
}

void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<double> out, std::span<double> probs) {
  const int64_t width = s.heads * s.head_dim;
  std::vector<double> scores(static_cast<size_t>(s.sk));
  for (int64_t bt = 0; bt < s.batch; ++bt) {
    for (int64_t h = 0; h < s.heads; ++h) {
      for (int64_t i = 0; i < s.sq; ++i) {
        const double* qi = &q[(bt * s.sq + i) * width + h * s.head_dim];
        double mx = -INFINITY;
        for (int64_t j = 0; j < s.sk; ++j) {
          const double* kj = &k[(bt * s.sk + j) * width + h * s.head_dim];
          double dot = 0.0;
          for (int64_t p = 0; p < s.head_dim; ++p) dot += qi[p] * kj[p];
          scores[j] = dot * s.scale;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < s.sk; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* pr = &probs[((bt * s.heads + h) * s.sq + i) * s.sk];
        for (int64_t j = 0; j < s.sk; ++j) pr[j] = scores[j] / z;
        double* oi = &out[(bt * s.sq + i) * width + h * s.head_dim];
        for (int64_t p = 0; p < s.head_dim; ++p) {
          double acc = 0.0;
          for (int64_t j = 0; j < s.sk; ++j) acc += pr[j] * v[(bt * s.sk + j) * width + h * s.head_dim + p];
          oi[p] = acc;
        }
      }
    }
  }
}

void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv) {
  const int64_t width = s.heads * s.head_dim;
  std::vector<double> dp(static_cast<size_t>(s.sk));
  for (int64_t bt = 0; bt < s.batch; ++bt) {
    for (int64_t h = 0; h < s.heads; ++h) {
      const int64_t off = h * s.head_dim;
      for (int64_t i = 0; i < s.sq; ++i) {
        const double* pr = &probs[((bt * s.heads + h) * s.sq + i) * s.sk];
        const double* doi = &dout[(bt * s.sq + i) * width + off];
        double inner = 0.0;
        for (int64_t j = 0; j < s.sk; ++j) {
          const double* vj = &v[(bt * s.sk + j) * width + off];
          double acc = 0.0;
          for (int64_t p = 0; p < s.head_dim; ++p) acc += doi[p] * vj[p];
          dp[j] = acc;
          inner += acc * pr[j];
          double* dvj = &dv[(bt * s.sk + j) * width + off];
          for (int64_t p = 0; p < s.head_dim; ++p) dvj[p] += pr[j] * doi[p];
        }
        const double* qi = &q[(bt * s.sq + i) * width + off];
        double* dqi = &dq[(bt * s.sq + i) * width + off];
        for (int64_t j = 0; j < s.sk; ++j) {
          const double ds = pr[j] * (dp[j] - inner) * s.scale;
          const double* kj = &k[(bt * s.sk + j) * width + off];
          double* dkj = &dk[(bt * s.sk + j) * width + off];
          for (int64_t p = 0; p < s.head_dim; ++p) {
            dqi[p] += ds * kj[p];
            dkj[p] += ds * qi[p];
          }
        }
      }
    }
  }
}

void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> col) {
  const int64_t oh = g.out_height(), ow = g.out_width();
  const int64_t cols = g.batch * oh * ow;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel; ++ky) {
      for (int64_t kx = 0; kx < g.kernel; ++kx) {
        const int64_t row = (c * g.kernel + ky) * g.kernel + kx;
        for (int64_t b = 0; b < g.batch; ++b) {
          for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t iy = oy * g.stride - g.pad + ky;
              const int64_t ix = ox * g.stride - g.pad + kx;
              double val = 0.0;
              if (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width) {
                val = x[((b * g.channels + c) * g.height + iy) * g.width + ix];
              }
              col[row * cols + (b * oh + oy) * ow + ox] = val;
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> dx) {
  const int64_t oh = g.out_height(), ow = g.out_width();
  const int64_t cols = g.batch * oh * ow;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel; ++ky) {
      for (int64_t kx = 0; kx < g.kernel; ++kx) {
        const int64_t row = (c * g.kernel + ky) * g.kernel + kx;
        for (int64_t b = 0; b < g.batch; ++b) {
          for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t iy = oy * g.stride - g.pad + ky;
              const int64_t ix = ox * g.stride - g.pad + kx;
              if (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width) {
                dx[((b * g.channels + c) * g.height + iy) * g.width + ix] += col[row * cols + (b * oh + oy) * ow + ox];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace sdreid::kernels::serial
