#pragma once

// Dense compute kernels. Every kernel exists twice: a plain serial
// reference in `kernels::serial` and the OpenMP version exported directly in
// `kernels`. Parallel kernels split work over independent output rows only,
// so their results do not depend on the thread count.

#include <cstdint>
#include <span>

namespace sdreid::kernels {

/// Row-major C[M,N] = op(A) * op(B) (+ C when accumulate).
/// op(A) is A[M,K], or A stored as [K,M] when trans_a. Same for B.
struct GemmShape {
  int64_t m = 0;
  int64_t n = 0;
  int64_t k = 0;
  bool trans_a = false;
  bool trans_b = false;
};

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

/// out[i*n + j] = ||x_i - y_j||_2 for x[m,d], y[n,d].
void pairwise_distances(std::span<const double> x, int64_t m, std::span<const double> y, int64_t n, int64_t d,
                        std::span<double> out);

/// Scaled dot-product attention over packed heads.
/// q: [batch*sq, heads*head_dim], k and v: [batch*sk, heads*head_dim].
/// probs receives the softmax weights laid out [batch, heads, sq, sk].
struct AttentionShape {
  int64_t batch = 1;
  int64_t sq = 1;
  int64_t sk = 1;
  int64_t heads = 1;
  int64_t head_dim = 1;
  double scale = 1.0;
};

void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<double> out, std::span<double> probs);

/// Gradients are accumulated into dq, dk, dv.
void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv);

/// Convolution lowering for a batch: x[batch, ch, h, w] ->
/// col[ch*kh*kw, batch*oh*ow]; col2im scatters back and accumulates.
struct ConvGeometry {
  int64_t batch = 1;
  int64_t channels = 1;
  int64_t height = 1;
  int64_t width = 1;
  int64_t kernel = 3;
  int64_t stride = 1;
  int64_t pad = 1;
  int64_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int64_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> col);
void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> dx);

namespace serial {
void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);
void pairwise_distances(std::span<const double> x, int64_t m, std::span<const double> y, int64_t n, int64_t d,
                        std::span<double> out);
void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<double> out, std::span<double> probs);
void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv);
void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> col);
void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> dx);
}  // namespace serial

/// Threads the OpenMP kernels may use (1 when built without OpenMP).
int max_threads();

}  // namespace sdreid::kernels
