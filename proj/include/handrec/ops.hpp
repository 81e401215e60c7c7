#pragma once

#include <cstdint>
#include <vector>

#include "handrec/tensor.hpp"

namespace handrec::ad {

// Boolean attention mask, query rows by key columns. True = attention allowed.
struct AttentionMask {
  int q = 0;
  int k = 0;
  std::vector<std::uint8_t> allow;

  static AttentionMask all(int q, int k) {
    AttentionMask m;
    m.q = q;
    m.k = k;
    m.allow.assign(size_t(q) * size_t(k), 1);
    return m;
  }
  bool at(int r, int c) const { return allow[size_t(r) * size_t(k) + size_t(c)] != 0; }
  void set(int r, int c, bool v) { allow[size_t(r) * size_t(k) + size_t(c)] = v ? 1 : 0; }
};

// Linear gather/scatter entry: out[dst] += coeff * src[src].
struct ScatterEntry {
  int src;
  int dst;
  double coeff;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor smul(const Tensor& a, const Tensor& s);  // s is a scalar tensor
Tensor abs_(const Tensor& a);
Tensor sqrt_(const Tensor& a);
Tensor sin_(const Tensor& a);
Tensor cos_(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const std::vector<int>& shape);
Tensor sparse_matmul(const SparseMatrix& m, const Tensor& x);

// ---- broadcasting over a rank-2 tensor ----
Tensor add_rowvec(const Tensor& t, const Tensor& v);  // t: n x d, v: [d], row-wise add
Tensor mul_rowvec(const Tensor& t, const Tensor& v);  // t: n x d, v: [d], per-column scale
Tensor mul_colvec(const Tensor& t, const Tensor& v);  // t: n x d, v: [n], per-row scale

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- structure ----
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& t, int r0, int r1);   // axis 0, any rank
Tensor slice_cols(const Tensor& t, int c0, int c1);   // rank 2
Tensor index_rows(const Tensor& t, const std::vector<int>& idx);
Tensor gather(const Tensor& t, const std::vector<int>& idx);  // flat indices
Tensor scatter_linear(const Tensor& src, const std::vector<ScatterEntry>& entries,
                      const std::vector<int>& out_shape);

// ---- neural net ----
// scores: [heads, q, k]; mask rows must each allow at least one key.
// Masked entries of the result are exactly zero; allowed rows sum to one.
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);

// Row-wise normalization over the last dim of an n x d tensor, d >= 2.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// feature: [C, H, W]; coords: [n, 2] as (x, y) in [-1, 1], align-corners
// convention with border clamp. Differentiable in both arguments.
Tensor bilinear_sample(const Tensor& feature, const Tensor& coords);

// input: [Cin, H, W]; weight: [Cout, Cin, kh, kw]; bias: [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);

// input: [Cin, H, W]; weight: [Cin, Cout, kh, kw]; bias: [Cout].
// Output spatial size: (H - 1) * stride - 2 * pad + kh.
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride, int pad);

}  // namespace handrec::ad
