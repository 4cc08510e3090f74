#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sdreid/kernels.hpp"

namespace sdreid::kernels {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr int64_t kParallelWork = 1 << 15;
}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  const int64_t m = s.m, n = s.n, k = s.k;
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  const bool par = m * n * k >= kParallelWork;

  if (!s.trans_a && !s.trans_b) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      if (!accumulate) std::fill(crow, crow + n, 0.0);
      const double* arow = A + i * k;
      for (int64_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = B + p * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!s.trans_a && s.trans_b) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < m; ++i) {
      const double* arow = A + i * k;
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const double* brow = B + j * k;
        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
        for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] = accumulate ? crow[j] + acc : acc;
      }
    }
  } else if (s.trans_a && !s.trans_b) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      if (!accumulate) std::fill(crow, crow + n, 0.0);
      for (int64_t p = 0; p < k; ++p) {
        const double av = A[p * m + i];
        if (av == 0.0) continue;
        const double* brow = B + p * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const double* brow = B + j * k;
        double acc = 0.0;
        for (int64_t p = 0; p < k; ++p) acc += A[p * m + i] * brow[p];
        crow[j] = accumulate ? crow[j] + acc : acc;
      }
    }
  }
}

void pairwise_distances(std::span<const double> x, int64_t m, std::span<const double> y, int64_t n, int64_t d,
                        std::span<double> out) {
#pragma omp parallel for schedule(static) if (m * n * d >= kParallelWork)
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * d;
    for (int64_t j = 0; j < n; ++j) {
      const double* yj = y.data() + j * d;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (int64_t p = 0; p < d; ++p) {
        const double diff = xi[p] - yj[p];
        acc += diff * diff;
      }
      out[i * n + j] = std::sqrt(acc);
    }
  }
}

void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<double> out, std::span<double> probs) {
  const int64_t width = s.heads * s.head_dim;
  const int64_t pairs = s.batch * s.heads;
  const bool par = pairs * s.sq * s.sk * s.head_dim >= kParallelWork;
#pragma omp parallel if (par)
  {
    std::vector<double> acc(static_cast<size_t>(s.head_dim));
#pragma omp for schedule(static)
    for (int64_t bh = 0; bh < pairs; ++bh) {
      const int64_t bt = bh / s.heads, h = bh % s.heads, off = h * s.head_dim;
      for (int64_t i = 0; i < s.sq; ++i) {
        const double* qi = q.data() + (bt * s.sq + i) * width + off;
        double* pr = probs.data() + (bh * s.sq + i) * s.sk;
        double mx = -INFINITY;
        for (int64_t j = 0; j < s.sk; ++j) {
          const double* kj = k.data() + (bt * s.sk + j) * width + off;
          double dot = 0.0;
#pragma omp simd reduction(+ : dot)
          for (int64_t p = 0; p < s.head_dim; ++p) dot += qi[p] * kj[p];
          pr[j] = dot * s.scale;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < s.sk; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        const double inv = 1.0 / z;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t j = 0; j < s.sk; ++j) {
          pr[j] *= inv;
          const double* vj = v.data() + (bt * s.sk + j) * width + off;
          const double w = pr[j];
#pragma omp simd
          for (int64_t p = 0; p < s.head_dim; ++p) acc[p] += w * vj[p];
        }
        std::copy(acc.begin(), acc.end(), out.data() + (bt * s.sq + i) * width + off);
      }
    }
  }
}

void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv) {
  const int64_t width = s.heads * s.head_dim;
  const int64_t pairs = s.batch * s.heads;
  const bool par = pairs * s.sq * s.sk * s.head_dim >= kParallelWork;
  // Each (batch, head) pair owns a disjoint block of dq/dk/dv.
#pragma omp parallel if (par)
  {
    std::vector<double> dp(static_cast<size_t>(s.sk));
#pragma omp for schedule(static)
    for (int64_t bh = 0; bh < pairs; ++bh) {
      const int64_t bt = bh / s.heads, h = bh % s.heads, off = h * s.head_dim;
      for (int64_t i = 0; i < s.sq; ++i) {
        const double* pr = probs.data() + (bh * s.sq + i) * s.sk;
        const double* doi = dout.data() + (bt * s.sq + i) * width + off;
        double inner = 0.0;
        for (int64_t j = 0; j < s.sk; ++j) {
          const double* vj = v.data() + (bt * s.sk + j) * width + off;
          double* dvj = dv.data() + (bt * s.sk + j) * width + off;
          double acc = 0.0;
          const double w = pr[j];
#pragma omp simd reduction(+ : acc)
          for (int64_t p = 0; p < s.head_dim; ++p) {
            acc += doi[p] * vj[p];
            dvj[p] += w * doi[p];
          }
          dp[j] = acc;
          inner += acc * w;
        }
        const double* qi = q.data() + (bt * s.sq + i) * width + off;
        double* dqi = dq.data() + (bt * s.sq + i) * width + off;
        for (int64_t j = 0; j < s.sk; ++j) {
          const double ds = pr[j] * (dp[j] - inner) * s.scale;
          const double* kj = k.data() + (bt * s.sk + j) * width + off;
          double* dkj = dk.data() + (bt * s.sk + j) * width + off;
#pragma omp simd
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
  const int64_t rows = g.channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (int64_t row = 0; row < rows; ++row) {
    const int64_t kx = row % g.kernel;
    const int64_t ky = (row / g.kernel) % g.kernel;
    const int64_t c = row / (g.kernel * g.kernel);
    double* dst = col.data() + row * cols;
    for (int64_t b = 0; b < g.batch; ++b) {
      const double* plane = x.data() + (b * g.channels + c) * g.height * g.width;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy = oy * g.stride - g.pad + ky;
        double* out = dst + (b * oh + oy) * ow;
        if (iy < 0 || iy >= g.height) {
          std::fill(out, out + ow, 0.0);
          continue;
        }
        for (int64_t ox = 0; ox < ow; ++ox) {
          const int64_t ix = ox * g.stride - g.pad + kx;
          out[ox] = (ix >= 0 && ix < g.width) ? plane[iy * g.width + ix] : 0.0;
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> dx) {
  const int64_t oh = g.out_height(), ow = g.out_width();
  const int64_t cols = g.batch * oh * ow;
  // Rows of one channel only touch that channel's planes.
#pragma omp parallel for schedule(static) if (g.channels * g.kernel * g.kernel * cols >= kParallelWork)
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel; ++ky) {
      for (int64_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = col.data() + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (int64_t b = 0; b < g.batch; ++b) {
          double* plane = dx.data() + (b * g.channels + c) * g.height * g.width;
          for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            const double* in = src + (b * oh + oy) * ow;
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.width) plane[iy * g.width + ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace sdreid::kernels
