#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "handrec/gradcheck.hpp"
#include "handrec/ops.hpp"
#include "handrec/rng.hpp"
#include "handrec/tensor.hpp"
#include "oracles.hpp"

using namespace handrec;
using namespace handrec::ad;

namespace {

Tensor rand_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor construction validates shape against data") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ContractError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ContractError);
  Tensor t = Tensor::identity(3);
  CHECK(t.at(0, 0) == 1.0);
  CHECK(t.at(0, 1) == 0.0);
  CHECK(t.size() == 9);
}

TEST_CASE("matmul matches hand result and brute force") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape == std::vector<int>{2, 1});
  CHECK(c[0] == 3.0);
  CHECK(c[1] == 7.0);

  Rng rng(7);
  Tensor x = rand_tensor({5, 4}, rng);
  Tensor y = rand_tensor({4, 3}, rng);
  Tensor z = matmul(x, y);
  auto ref = oracle::matmul(x.data, 5, 4, y.data, 3);
  for (int i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(ref[size_t(i)]).epsilon(1e-12));

  CHECK_THROWS_AS(matmul(x, x), ContractError);
}

TEST_CASE("backward seeds root with ones and leaves untouched grads zero") {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {3.0, 4.0}));
  Tensor unused = tape.watch(Tensor({3}, {1.0, 1.0, 1.0}));
  Tensor y = sum(mul(x, x));
  tape.backward(y);
  CHECK(tape.grad(y).data == std::vector<double>{1.0});
  Tensor gx = tape.grad(x);
  CHECK(gx[0] == doctest::Approx(6.0));
  CHECK(gx[1] == doctest::Approx(8.0));
  Tensor gu = tape.grad(unused);
  CHECK(gu.data == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("backward rejects non-scalar roots and foreign tensors") {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
  Tensor c = Tensor::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(c), ContractError);
}

TEST_CASE("elementwise ops gradient-check") {
  Rng rng(11);
  Tensor a = rand_tensor({3, 4}, rng, 0.2, 2.0);
  Tensor b = rand_tensor({3, 4}, rng, 0.2, 2.0);

  auto check1 = [&](const char* name, auto make) {
    ScalarFn f = [&](Tape& t, const Tensor& x) { return sum(make(t, x)); };
    double err = grad_check(f, a, 1e-5);
    INFO(name);
    CHECK(err < 1e-6);
  };
  check1("add", [&](Tape&, const Tensor& x) { return add(x, b); });
  check1("sub", [&](Tape&, const Tensor& x) { return sub(b, x); });
  check1("mul", [&](Tape&, const Tensor& x) { return mul(x, b); });
  check1("div_num", [&](Tape&, const Tensor& x) { return div(x, b); });
  check1("div_den", [&](Tape&, const Tensor& x) { return div(b, x); });
  check1("scale", [&](Tape&, const Tensor& x) { return scale(x, -2.5); });
  check1("add_scalar", [&](Tape&, const Tensor& x) { return add_scalar(x, 0.7); });
  check1("sqrt", [&](Tape&, const Tensor& x) { return sqrt_(x); });
  check1("sin", [&](Tape&, const Tensor& x) { return sin_(x); });
  check1("cos", [&](Tape&, const Tensor& x) { return cos_(x); });
  check1("gelu", [&](Tape&, const Tensor& x) { return gelu(x); });
  check1("abs", [&](Tape&, const Tensor& x) { return abs_(x); });
  check1("mean", [&](Tape&, const Tensor& x) { return mean(mul(x, x)); });
}

TEST_CASE("abs subgradient at zero is zero") {
  Tape tape;
  Tensor x = tape.watch(Tensor({3}, {-2.0, 0.0, 5.0}));
  Tensor y = sum(abs_(x));
  tape.backward(y);
  Tensor g = tape.grad(x);
  CHECK(g[0] == -1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 1.0);
}

TEST_CASE("smul couples both factors") {
  Rng rng(13);
  Tensor a = rand_tensor({4}, rng);
  Tensor s = Tensor::scalar(1.7);
  ScalarFn fa = [&](Tape&, const Tensor& x) { return sum(smul(x, s)); };
  CHECK(grad_check(fa, a, 1e-5) < 1e-6);
  ScalarFn fs = [&](Tape&, const Tensor& x) { return sum(smul(a, x)); };
  CHECK(grad_check(fs, s, 1e-5) < 1e-6);
}

TEST_CASE("matmul and transpose gradient-check") {
  Rng rng(17);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  Tensor w = rand_tensor({3, 2}, rng);
  ScalarFn fa = [&](Tape&, const Tensor& x) { return sum(mul(matmul(x, b), w)); };
  CHECK(grad_check(fa, a, 1e-5) < 1e-6);
  ScalarFn fb = [&](Tape&, const Tensor& x) { return sum(mul(matmul(a, x), w)); };
  CHECK(grad_check(fb, b, 1e-5) < 1e-6);
  Tensor wt = rand_tensor({4, 3}, rng);
  ScalarFn ft = [&](Tape&, const Tensor& x) { return sum(mul(transpose(x), wt)); };
  CHECK(grad_check(ft, a, 1e-5) < 1e-6);
}

TEST_CASE("broadcast helpers match loops and gradient-check") {
  Rng rng(19);
  Tensor t = rand_tensor({4, 3}, rng);
  Tensor rv = rand_tensor({3}, rng);
  Tensor cv = rand_tensor({4}, rng);

  Tensor arv = add_rowvec(t, rv);
  Tensor mrv = mul_rowvec(t, rv);
  Tensor mcv = mul_colvec(t, cv);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(arv.at(i, j) == doctest::Approx(t.at(i, j) + rv[j]));
      CHECK(mrv.at(i, j) == doctest::Approx(t.at(i, j) * rv[j]));
      CHECK(mcv.at(i, j) == doctest::Approx(t.at(i, j) * cv[i]));
    }

  Tensor w = rand_tensor({4, 3}, rng);
  ScalarFn f1 = [&](Tape&, const Tensor& x) { return sum(mul(add_rowvec(t, x), w)); };
  CHECK(grad_check(f1, rv, 1e-5) < 1e-6);
  ScalarFn f2 = [&](Tape&, const Tensor& x) { return sum(mul(mul_rowvec(x, rv), w)); };
  CHECK(grad_check(f2, t, 1e-5) < 1e-6);
  ScalarFn f3 = [&](Tape&, const Tensor& x) { return sum(mul(mul_colvec(t, x), w)); };
  CHECK(grad_check(f3, cv, 1e-5) < 1e-6);
}

TEST_CASE("structure ops roundtrip and gradient-check") {
  Rng rng(23);
  Tensor a = rand_tensor({3, 2}, rng);
  Tensor b = rand_tensor({2, 2}, rng);
  Tensor cat = concat_rows({a, b});
  CHECK(cat.shape == std::vector<int>{5, 2});
  Tensor back = slice_rows(cat, 0, 3);
  for (int i = 0; i < a.size(); ++i) CHECK(back[i] == a[i]);

  Tensor cc = concat_cols(a, rand_tensor({3, 3}, rng));
  CHECK(cc.shape == std::vector<int>{3, 5});
  Tensor mid = slice_cols(cc, 2, 4);
  CHECK(mid.shape == std::vector<int>{3, 2});

  Tensor w = rand_tensor({5, 2}, rng);
  ScalarFn f = [&](Tape&, const Tensor& x) { return sum(mul(concat_rows({x, b}), w)); };
  CHECK(grad_check(f, a, 1e-5) < 1e-6);
  ScalarFn fs = [&](Tape&, const Tensor& x) { return sum(slice_rows(x, 1, 3)); };
  CHECK(grad_check(fs, a, 1e-5) < 1e-6);
  ScalarFn fc = [&](Tape&, const Tensor& x) { return sum(slice_cols(x, 0, 1)); };
  CHECK(grad_check(fc, a, 1e-5) < 1e-6);

  std::vector<int> idx = {2, 0, 2};
  Tensor picked = index_rows(a, idx);
  CHECK(picked.at(0, 0) == a.at(2, 0));
  CHECK(picked.at(1, 1) == a.at(0, 1));
  Tensor wi = rand_tensor({3, 2}, rng);
  ScalarFn fi = [&](Tape&, const Tensor& x) { return sum(mul(index_rows(x, idx), wi)); };
  CHECK(grad_check(fi, a, 1e-5) < 1e-6);

  std::vector<int> flat = {5, 0, 5, 3};
  ScalarFn fg = [&](Tape&, const Tensor& x) { return sum(mul(gather(x, flat), Tensor({4}, {1, 2, 3, 4}))); };
  CHECK(grad_check(fg, a, 1e-5) < 1e-6);

  std::vector<ScatterEntry> entries = {{0, 1, 1.0}, {1, 3, -2.0}, {0, 3, 0.5}};
  Tensor src({2}, {3.0, 4.0});
  Tensor sc = scatter_linear(src, entries, {5});
  CHECK(sc[1] == 3.0);
  CHECK(sc[3] == doctest::Approx(-8.0 + 1.5));
  ScalarFn fsc = [&](Tape&, const Tensor& x) {
    return sum(mul(scatter_linear(x, entries, {5}), Tensor({5}, {1, 2, 3, 4, 5})));
  };
  CHECK(grad_check(fsc, src, 1e-5) < 1e-6);

  Tensor wr = rand_tensor({2, 3}, rng);
  ScalarFn fr = [&](Tape&, const Tensor& x) { return sum(mul(reshape(x, {2, 3}), wr)); };
  CHECK(grad_check(fr, a, 1e-5) < 1e-6);
}

TEST_CASE("masked softmax: zeros at masked entries, unit row sums, oracle match") {
  Rng rng(29);
  int h = 2, q = 4, k = 5;
  Tensor scores = rand_tensor({h, q, k}, rng, -3.0, 3.0);
  AttentionMask mask = AttentionMask::all(q, k);
  mask.set(0, 1, false);
  mask.set(0, 3, false);
  mask.set(2, 0, false);
  mask.set(2, 1, false);
  mask.set(2, 2, false);
  mask.set(2, 3, false);  // row 2 keeps only key 4

  Tensor y = masked_softmax(scores, mask);
  for (int hh = 0; hh < h; ++hh) {
    for (int r = 0; r < q; ++r) {
      double rowsum = 0.0;
      std::vector<double> srow(static_cast<size_t>(k));
      std::vector<bool> allow(static_cast<size_t>(k));
      for (int c = 0; c < k; ++c) {
        double v = y.data[size_t((hh * q + r) * k + c)];
        srow[size_t(c)] = scores.data[size_t((hh * q + r) * k + c)];
        allow[size_t(c)] = mask.at(r, c);
        if (!mask.at(r, c)) CHECK(v == 0.0);
        rowsum += v;
      }
      CHECK(std::fabs(rowsum - 1.0) < 1e-12);
      auto ref = oracle::masked_softmax_row(srow, allow);
      for (int c = 0; c < k; ++c)
        CHECK(y.data[size_t((hh * q + r) * k + c)] == doctest::Approx(ref[size_t(c)]).epsilon(1e-12));
    }
  }

  // Uniform scores spread mass evenly over the allowed keys.
  Tensor flat = Tensor::full({1, 1, 4}, 0.3);
  Tensor u = masked_softmax(flat, AttentionMask::all(1, 4));
  for (int c = 0; c < 4; ++c) CHECK(u[c] == doctest::Approx(0.25).epsilon(1e-15));

  AttentionMask dead = AttentionMask::all(2, 3);
  for (int c = 0; c < 3; ++c) dead.set(1, c, false);
  CHECK_THROWS_AS(masked_softmax(rand_tensor({1, 2, 3}, rng), dead), ContractError);

  Tensor w = rand_tensor({h, q, k}, rng);
  ScalarFn f = [&](Tape&, const Tensor& x) { return sum(mul(masked_softmax(x, mask), w)); };
  CHECK(grad_check(f, scores, 1e-5) < 1e-6);
}

TEST_CASE("layer norm normalizes rows and gradient-checks") {
  Rng rng(31);
  Tensor x = rand_tensor({3, 8}, rng, -2.0, 2.0);
  Tensor g1 = Tensor::full({8}, 1.0);
  Tensor b0 = Tensor::zeros({8});
  Tensor y = layer_norm(x, g1, b0);
  for (int i = 0; i < 3; ++i) {
    double mu = 0.0, var = 0.0;
    for (int j = 0; j < 8; ++j) mu += y.at(i, j);
    mu /= 8;
    for (int j = 0; j < 8; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 8;
    CHECK(std::fabs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps in the denominator shifts it slightly
  }
  Tensor gain = rand_tensor({8}, rng, 0.5, 1.5);
  Tensor bias = rand_tensor({8}, rng);
  Tensor w = rand_tensor({3, 8}, rng);
  ScalarFn fx = [&](Tape&, const Tensor& t) { return sum(mul(layer_norm(t, gain, bias), w)); };
  CHECK(grad_check(fx, x, 1e-5) < 1e-6);
  ScalarFn fg = [&](Tape&, const Tensor& t) { return sum(mul(layer_norm(x, t, bias), w)); };
  CHECK(grad_check(fg, gain, 1e-5) < 1e-6);
  ScalarFn fb = [&](Tape&, const Tensor& t) { return sum(mul(layer_norm(x, gain, t), w)); };
  CHECK(grad_check(fb, bias, 1e-5) < 1e-6);
}

TEST_CASE("bilinear sampling: exact at lattice points, oracle match, both gradients") {
  Rng rng(37);
  int C = 2, H = 5, W = 7;
  Tensor feat = rand_tensor({C, H, W}, rng);

  // Corner (-1,-1) is pixel (0,0); (1,1) is pixel (W-1,H-1).
  Tensor corners({4, 2}, {-1, -1, 1, 1, -1, 1, 1, -1});
  Tensor got = bilinear_sample(feat, corners);
  CHECK(got.at(0, 0) == feat.data[0]);
  CHECK(got.at(1, 0) == feat.data[size_t(H * W) - 1]);
  CHECK(got.at(2, 1) == feat.data[size_t(H * W) + size_t((H - 1) * W)]);

  Tensor pts = rand_tensor({6, 2}, rng, -1.3, 1.3);  // includes off-image points
  Tensor sampled = bilinear_sample(feat, pts);
  for (int i = 0; i < 6; ++i) {
    for (int c = 0; c < C; ++c) {
      std::vector<double> plane(feat.data.begin() + size_t(c * H * W),
                                feat.data.begin() + size_t((c + 1) * H * W));
      double ref = oracle::bilinear_at(plane, H, W, pts.at(i, 0), pts.at(i, 1));
      CHECK(sampled.at(i, c) == doctest::Approx(ref).epsilon(1e-12));
    }
  }

  Tensor w = rand_tensor({6, C}, rng);
  ScalarFn ff = [&](Tape&, const Tensor& x) { return sum(mul(bilinear_sample(x, pts), w)); };
  CHECK(grad_check(ff, feat, 1e-5) < 1e-6);
  ScalarFn fc = [&](Tape&, const Tensor& x) { return sum(mul(bilinear_sample(feat, x), w)); };
  CHECK(grad_check(fc, pts, 1e-5) < 1e-5);
}

TEST_CASE("conv2d: brute-force oracle and gradients") {
  Rng rng(41);
  int Cin = 2, H = 6, W = 6, Cout = 3, kh = 3, kw = 3, stride = 2, pad = 1;
  Tensor in = rand_tensor({Cin, H, W}, rng);
  Tensor wt = rand_tensor({Cout, Cin, kh, kw}, rng);
  Tensor bs = rand_tensor({Cout}, rng);
  Tensor out = conv2d(in, wt, bs, stride, pad);
  int Ho = (H + 2 * pad - kh) / stride + 1;
  CHECK(out.shape == std::vector<int>{Cout, Ho, Ho});
  // Independent accumulation order.
  for (int co = 0; co < Cout; ++co)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Ho; ++ox) {
        double acc = bs[co];
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            for (int ci = 0; ci < Cin; ++ci) {
              int y = oy * stride - pad + ky, x = ox * stride - pad + kx;
              if (y < 0 || y >= H || x < 0 || x >= W) continue;
              acc += in.data[size_t((ci * H + y) * W + x)] *
                     wt.data[size_t(((co * Cin + ci) * kh + ky) * kw + kx)];
            }
        CHECK(out.data[size_t((co * Ho + oy) * Ho + ox)] == doctest::Approx(acc).epsilon(1e-12));
      }

  Tensor w2 = rand_tensor(out.shape, rng);
  ScalarFn fi = [&](Tape&, const Tensor& x) { return sum(mul(conv2d(x, wt, bs, stride, pad), w2)); };
  CHECK(grad_check(fi, in, 1e-5) < 1e-6);
  ScalarFn fw = [&](Tape&, const Tensor& x) { return sum(mul(conv2d(in, x, bs, stride, pad), w2)); };
  CHECK(grad_check(fw, wt, 1e-5) < 1e-6);
  ScalarFn fb = [&](Tape&, const Tensor& x) { return sum(mul(conv2d(in, wt, x, stride, pad), w2)); };
  CHECK(grad_check(fb, bs, 1e-5) < 1e-6);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  Rng rng(43);
  // H chosen so (H + 2p - kh) divides the stride exactly; adjoint shapes then match.
  int Cin = 2, H = 6, W = 6, Cout = 3, kh = 4, kw = 4, stride = 2, pad = 1;
  Tensor x = rand_tensor({Cin, H, W}, rng);
  Tensor wt = rand_tensor({Cout, Cin, kh, kw}, rng);
  Tensor zero_b_out = Tensor::zeros({Cout});
  Tensor zero_b_in = Tensor::zeros({Cin});
  Tensor cx = conv2d(x, wt, zero_b_out, stride, pad);
  Tensor y = rand_tensor(cx.shape, rng);
  // Same buffer viewed as [Cout, Cin, kh, kw] for the transposed direction.
  Tensor wt_t(std::vector<int>{Cout, Cin, kh, kw}, wt.data);
  Tensor ty = conv_transpose2d(y, wt_t, zero_b_in, stride, pad);
  CHECK(ty.shape == x.shape);
  double lhs = 0.0, rhs = 0.0;
  for (int i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (int i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));

  int Ho = (H - 1) * stride - 2 * pad + kh;
  CHECK(ty.shape == std::vector<int>{Cin, H, W});
  Tensor up = conv_transpose2d(x, rand_tensor({Cin, Cout, kh, kw}, rng), zero_b_out, stride, pad);
  CHECK(up.shape == std::vector<int>{Cout, Ho, Ho});

  Tensor wt2 = rand_tensor({Cin, Cout, kh, kw}, rng);
  Tensor w3 = rand_tensor(up.shape, rng);
  ScalarFn fi = [&](Tape&, const Tensor& t) { return sum(mul(conv_transpose2d(t, wt2, zero_b_out, stride, pad), w3)); };
  CHECK(grad_check(fi, x, 1e-5) < 1e-6);
  ScalarFn fw = [&](Tape&, const Tensor& t) { return sum(mul(conv_transpose2d(x, t, zero_b_out, stride, pad), w3)); };
  CHECK(grad_check(fw, wt2, 1e-5) < 1e-6);
}

TEST_CASE("sparse matmul matches dense and gradient-checks") {
  Rng rng(47);
  SparseMatrix m;
  m.rows = 4;
  m.cols = 3;
  m.entries = {{0, 0, 1.0}, {1, 0, 0.5}, {1, 1, 0.5}, {2, 2, 1.0}, {3, 1, 0.25}, {3, 2, 0.75}};
  Tensor x = rand_tensor({3, 2}, rng);
  Tensor y = sparse_matmul(m, x);
  Tensor dense = Tensor::zeros({4, 3});
  for (const auto& e : m.entries) dense.at(e.row, e.col) += e.value;
  Tensor ref = matmul(dense, x);
  for (int i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-14));

  Tensor w = rand_tensor({4, 2}, rng);
  ScalarFn f = [&](Tape&, const Tensor& t) { return sum(mul(sparse_matmul(m, t), w)); };
  CHECK(grad_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("grad_check flags a corrupted backward") {
  Rng rng(53);
  Tensor a = rand_tensor({3}, rng);
  ScalarFn broken = [](Tape& t, const Tensor& x) {
    // Forward is sum(2x); backward deliberately claims the gradient is 3.
    double acc = 0.0;
    for (double v : x.data) acc += 2.0 * v;
    Tensor out = Tensor::scalar(acc);
    if (x.on_tape()) {
      int xn = x.node;
      std::vector<int> xshape = x.shape;
      out.tape = &t;
      out.node = t.record("broken", {xn}, {1}, [xn, xshape](const Tensor& g, Tape& tp) {
        tp.accumulate(xn, Tensor::full(xshape, 3.0 * g.data[0]));
      });
    }
    return out;
  };
  double err = grad_check(broken, a, 1e-5);
  CHECK(err > 0.1);
}

TEST_CASE("grad_check rejects eps outside its window") {
  Tensor a = Tensor::scalar(1.0);
  ScalarFn f = [](Tape&, const Tensor& x) { return sum(x); };
  CHECK_THROWS_AS(grad_check(f, a, 1e-2), ContractError);
  CHECK_THROWS_AS(grad_check(f, a, 1e-8), ContractError);
}

TEST_CASE("non-finite op output raises a numeric error") {
  Tensor a = Tensor::scalar(1.0);
  Tensor z = Tensor::scalar(0.0);
  CHECK_THROWS_AS(div(a, z), NumericError);
  CHECK_THROWS_AS(sqrt_(Tensor::scalar(-1.0)), NumericError);
}

TEST_CASE("mixed-tape inputs are rejected") {
  Tape t1, t2;
  Tensor a = t1.watch(Tensor::scalar(1.0));
  Tensor b = t2.watch(Tensor::scalar(2.0));
  CHECK_THROWS_AS(add(a, b), ContractError);
}
