#include "handrec/ops.hpp"

#include <cmath>
#include <initializer_list>
#include <numeric>

namespace handrec::ad {

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tp = nullptr;
  for (const Tensor* t : ts) {
    if (!t->on_tape()) continue;
    if (tp != nullptr && t->tape != tp) throw ContractError("inputs recorded on different tapes");
    tp = t->tape;
  }
  return tp;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
  }
}

// Finishes an op: finiteness check, then tape registration when any input is live.
Tensor finish(Tensor out, const char* op, std::initializer_list<const Tensor*> inputs,
              const std::function<Tape::BackwardFn()>& make_backward) {
  check_finite(out, op);
  Tape* tp = common_tape(inputs);
  if (tp == nullptr) return out;
  std::vector<int> in_nodes;
  for (const Tensor* t : inputs) in_nodes.push_back(t->on_tape() ? t->node : -1);
  out.tape = tp;
  out.node = tp->record(op, std::move(in_nodes), out.shape, make_backward());
  return out;
}

int node_id(const Tensor& t) { return t.on_tape() ? t.node : -1; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.detached();
  for (int i = 0; i < out.size(); ++i) out[i] += b[i];
  return finish(std::move(out), "add", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    return [an, bn](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) t.accumulate(bn, g);
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.detached();
  for (int i = 0; i < out.size(); ++i) out[i] -= b[i];
  return finish(std::move(out), "sub", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    return [an, bn](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) {
        Tensor gb = g.detached();
        for (double& v : gb.data) v = -v;
        t.accumulate(bn, gb);
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.detached();
  for (int i = 0; i < out.size(); ++i) out[i] *= b[i];
  return finish(std::move(out), "mul", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    Tensor av = a.detached(), bv = b.detached();
    return [an, bn, av, bv](const Tensor& g, Tape& t) {
      if (an >= 0) {
        Tensor ga = g.detached();
        for (int i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
        t.accumulate(an, ga);
      }
      if (bn >= 0) {
        Tensor gb = g.detached();
        for (int i = 0; i < gb.size(); ++i) gb[i] *= av[i];
        t.accumulate(bn, gb);
      }
    };
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out = a.detached();
  for (int i = 0; i < out.size(); ++i) out[i] /= b[i];
  return finish(std::move(out), "div", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    Tensor av = a.detached(), bv = b.detached();
    return [an, bn, av, bv](const Tensor& g, Tape& t) {
      if (an >= 0) {
        Tensor ga = g.detached();
        for (int i = 0; i < ga.size(); ++i) ga[i] /= bv[i];
        t.accumulate(an, ga);
      }
      if (bn >= 0) {
        Tensor gb = g.detached();
        for (int i = 0; i < gb.size(); ++i) gb[i] *= -av[i] / (bv[i] * bv[i]);
        t.accumulate(bn, gb);
      }
    };
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  Tensor out = a.detached();
  for (double& v : out.data) v *= c;
  return finish(std::move(out), "scale", {&a}, [&] {
    int an = node_id(a);
    return [an, c](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (double& v : ga.data) v *= c;
      t.accumulate(an, ga);
    };
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = a.detached();
  for (double& v : out.data) v += c;
  return finish(std::move(out), "add_scalar", {&a}, [&] {
    int an = node_id(a);
    return [an](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, g);
    };
  });
}

Tensor smul(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "smul: multiplier must be scalar, got shape " + shape_str(s.shape));
  double sv = s.data[0];
  Tensor out = a.detached();
  for (double& v : out.data) v *= sv;
  return finish(std::move(out), "smul", {&a, &s}, [&] {
    int an = node_id(a), sn = node_id(s);
    Tensor av = a.detached();
    std::vector<int> sshape = s.shape;
    return [an, sn, sv, av, sshape](const Tensor& g, Tape& t) {
      if (an >= 0) {
        Tensor ga = g.detached();
        for (double& v : ga.data) v *= sv;
        t.accumulate(an, ga);
      }
      if (sn >= 0) {
        double acc = 0.0;
        for (int i = 0; i < g.size(); ++i) acc += g[i] * av[i];
        t.accumulate(sn, Tensor(sshape, {acc}));
      }
    };
  });
}

Tensor abs_(const Tensor& a) {
  Tensor out = a.detached();
  for (double& v : out.data) v = std::fabs(v);
  return finish(std::move(out), "abs", {&a}, [&] {
    int an = node_id(a);
    Tensor av = a.detached();
    return [an, av](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (int i = 0; i < ga.size(); ++i) {
        double x = av[i];
        ga[i] *= (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      }
      t.accumulate(an, ga);
    };
  });
}

Tensor sqrt_(const Tensor& a) {
  Tensor out = a.detached();
  for (double& v : out.data) v = std::sqrt(v);
  Tensor ov = out.detached();
  return finish(std::move(out), "sqrt", {&a}, [&] {
    int an = node_id(a);
    return [an, ov](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (int i = 0; i < ga.size(); ++i) ga[i] *= 0.5 / ov[i];
      t.accumulate(an, ga);
    };
  });
}

Tensor sin_(const Tensor& a) {
  Tensor out = a.detached();
  for (double& v : out.data) v = std::sin(v);
  return finish(std::move(out), "sin", {&a}, [&] {
    int an = node_id(a);
    Tensor av = a.detached();
    return [an, av](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (int i = 0; i < ga.size(); ++i) ga[i] *= std::cos(av[i]);
      t.accumulate(an, ga);
    };
  });
}

Tensor cos_(const Tensor& a) {
  Tensor out = a.detached();
  for (double& v : out.data) v = std::cos(v);
  return finish(std::move(out), "cos", {&a}, [&] {
    int an = node_id(a);
    Tensor av = a.detached();
    return [an, av](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (int i = 0; i < ga.size(); ++i) ga[i] *= -std::sin(av[i]);
      t.accumulate(an, ga);
    };
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  Tensor out = a.detached();
  for (double& v : out.data) {
    double u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return finish(std::move(out), "gelu", {&a}, [&] {
    int an = node_id(a);
    Tensor av = a.detached();
    return [an, av](const Tensor& g, Tape& t) {
      if (an < 0) return;
      Tensor ga = g.detached();
      for (int i = 0; i < ga.size(); ++i) {
        double x = av[i];
        double u = kGeluC * (x + kGeluA * x * x * x);
        double th = std::tanh(u);
        double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        ga[i] *= d;
      }
      t.accumulate(an, ga);
    };
  });
}

namespace {

// Raw row-major matmul used by forward and by backward closures.
Tensor mm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  int am = ta ? a.shape[1] : a.shape[0];
  int ak = ta ? a.shape[0] : a.shape[1];
  int bk = tb ? b.shape[1] : b.shape[0];
  int bn = tb ? b.shape[0] : b.shape[1];
  require(ak == bk, "matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                        shape_str(b.shape));
  Tensor out = Tensor::zeros({am, bn});
  for (int i = 0; i < am; ++i) {
    for (int k = 0; k < ak; ++k) {
      double av = ta ? a.data[size_t(k) * size_t(am) + size_t(i)]
                     : a.data[size_t(i) * size_t(ak) + size_t(k)];
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : &b.data[size_t(k) * size_t(bn)];
      double* orow = &out.data[size_t(i) * size_t(bn)];
      if (tb) {
        for (int j = 0; j < bn; ++j) orow[j] += av * b.data[size_t(j) * size_t(bk) + size_t(k)];
      } else {
        for (int j = 0; j < bn; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: rank-2 tensors required, got " + shape_str(a.shape) + " x " + shape_str(b.shape));
  Tensor out = mm(a, b, false, false);
  return finish(std::move(out), "matmul", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    Tensor av = a.detached(), bv = b.detached();
    return [an, bn, av, bv](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, mm(g, bv, false, true));
      if (bn >= 0) t.accumulate(bn, mm(av, g, true, false));
    };
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: rank-2 tensor required, got " + shape_str(a.shape));
  int n = a.shape[0], d = a.shape[1];
  Tensor out = Tensor::zeros({d, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[size_t(j) * size_t(n) + size_t(i)] = a.data[size_t(i) * size_t(d) + size_t(j)];
  return finish(std::move(out), "transpose", {&a}, [&] {
    int an = node_id(a);
    return [an](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, transpose(g.detached()));
    };
  });
}

Tensor reshape(const Tensor& a, const std::vector<int>& shape) {
  require(shape_size(shape) == a.size(), "reshape: size mismatch, " + shape_str(a.shape) +
                                             " -> " + shape_str(shape));
  Tensor out(shape, a.data);
  return finish(std::move(out), "reshape", {&a}, [&] {
    int an = node_id(a);
    std::vector<int> old_shape = a.shape;
    return [an, old_shape](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, Tensor(old_shape, g.data));
    };
  });
}

Tensor sparse_matmul(const SparseMatrix& m, const Tensor& x) {
  require(x.rank() == 2, "sparse_matmul: rank-2 tensor required");
  require(x.shape[0] == m.cols, "sparse_matmul: matrix cols " + std::to_string(m.cols) +
                                    " vs tensor rows " + std::to_string(x.shape[0]));
  int d = x.shape[1];
  Tensor out = Tensor::zeros({m.rows, d});
  for (const auto& e : m.entries) {
    const double* src = &x.data[size_t(e.col) * size_t(d)];
    double* dst = &out.data[size_t(e.row) * size_t(d)];
    for (int j = 0; j < d; ++j) dst[j] += e.value * src[j];
  }
  return finish(std::move(out), "sparse_matmul", {&x}, [&] {
    int xn = node_id(x);
    SparseMatrix mv = m;
    std::vector<int> xshape = x.shape;
    return [xn, mv, xshape, d](const Tensor& g, Tape& t) {
      if (xn < 0) return;
      Tensor gx = Tensor::zeros(xshape);
      for (const auto& e : mv.entries) {
        const double* src = &g.data[size_t(e.row) * size_t(d)];
        double* dst = &gx.data[size_t(e.col) * size_t(d)];
        for (int j = 0; j < d; ++j) dst[j] += e.value * src[j];
      }
      t.accumulate(xn, gx);
    };
  });
}

Tensor add_rowvec(const Tensor& t, const Tensor& v) {
  require(t.rank() == 2 && v.rank() == 1 && v.shape[0] == t.shape[1],
          "add_rowvec: need n x d and [d], got " + shape_str(t.shape) + " and " + shape_str(v.shape));
  int n = t.shape[0], d = t.shape[1];
  Tensor out = t.detached();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[size_t(i) * size_t(d) + size_t(j)] += v[j];
  return finish(std::move(out), "add_rowvec", {&t, &v}, [&] {
    int tn = node_id(t), vn = node_id(v);
    return [tn, vn, n, d](const Tensor& g, Tape& tp) {
      if (tn >= 0) tp.accumulate(tn, g);
      if (vn >= 0) {
        Tensor gv = Tensor::zeros({d});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gv[j] += g.data[size_t(i) * size_t(d) + size_t(j)];
        tp.accumulate(vn, gv);
      }
    };
  });
}

Tensor mul_rowvec(const Tensor& t, const Tensor& v) {
  require(t.rank() == 2 && v.rank() == 1 && v.shape[0] == t.shape[1],
          "mul_rowvec: need n x d and [d], got " + shape_str(t.shape) + " and " + shape_str(v.shape));
  int n = t.shape[0], d = t.shape[1];
  Tensor out = t.detached();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[size_t(i) * size_t(d) + size_t(j)] *= v[j];
  return finish(std::move(out), "mul_rowvec", {&t, &v}, [&] {
    int tn = node_id(t), vn = node_id(v);
    Tensor tv = t.detached(), vv = v.detached();
    return [tn, vn, tv, vv, n, d](const Tensor& g, Tape& tp) {
      if (tn >= 0) {
        Tensor gt = g.detached();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gt.data[size_t(i) * size_t(d) + size_t(j)] *= vv[j];
        tp.accumulate(tn, gt);
      }
      if (vn >= 0) {
        Tensor gv = Tensor::zeros({d});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gv[j] += g.data[size_t(i) * size_t(d) + size_t(j)] * tv.data[size_t(i) * size_t(d) + size_t(j)];
        tp.accumulate(vn, gv);
      }
    };
  });
}

Tensor mul_colvec(const Tensor& t, const Tensor& v) {
  require(t.rank() == 2 && v.rank() == 1 && v.shape[0] == t.shape[0],
          "mul_colvec: need n x d and [n], got " + shape_str(t.shape) + " and " + shape_str(v.shape));
  int n = t.shape[0], d = t.shape[1];
  Tensor out = t.detached();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[size_t(i) * size_t(d) + size_t(j)] *= v[i];
  return finish(std::move(out), "mul_colvec", {&t, &v}, [&] {
    int tn = node_id(t), vn = node_id(v);
    Tensor tv = t.detached(), vv = v.detached();
    return [tn, vn, tv, vv, n, d](const Tensor& g, Tape& tp) {
      if (tn >= 0) {
        Tensor gt = g.detached();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gt.data[size_t(i) * size_t(d) + size_t(j)] *= vv[i];
        tp.accumulate(tn, gt);
      }
      if (vn >= 0) {
        Tensor gv = Tensor::zeros({n});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gv[i] += g.data[size_t(i) * size_t(d) + size_t(j)] * tv.data[size_t(i) * size_t(d) + size_t(j)];
        tp.accumulate(vn, gv);
      }
    };
  });
}

Tensor sum(const Tensor& a) {
  double acc = std::accumulate(a.data.begin(), a.data.end(), 0.0);
  Tensor out = Tensor::scalar(acc);
  return finish(std::move(out), "sum", {&a}, [&] {
    int an = node_id(a);
    std::vector<int> ashape = a.shape;
    return [an, ashape](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, Tensor::full(ashape, g.data[0]));
    };
  });
}

Tensor mean(const Tensor& a) {
  double acc = std::accumulate(a.data.begin(), a.data.end(), 0.0);
  double inv = 1.0 / double(a.size());
  Tensor out = Tensor::scalar(acc * inv);
  return finish(std::move(out), "mean", {&a}, [&] {
    int an = node_id(a);
    std::vector<int> ashape = a.shape;
    return [an, ashape, inv](const Tensor& g, Tape& t) {
      if (an >= 0) t.accumulate(an, Tensor::full(ashape, g.data[0] * inv));
    };
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  int d = -1, total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2, "concat_rows: rank-2 tensors required, got " + shape_str(p.shape));
    if (d < 0) d = p.shape[1];
    require(p.shape[1] == d, "concat_rows: column mismatch");
    total += p.shape[0];
  }
  Tensor out = Tensor::zeros({total, d});
  int r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + size_t(r) * size_t(d));
    r += p.shape[0];
  }
  std::vector<const Tensor*> refs;
  for (const Tensor& p : parts) refs.push_back(&p);
  check_finite(out, "concat_rows");
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    if (!p.on_tape()) continue;
    if (tp != nullptr && p.tape != tp) throw ContractError("inputs recorded on different tapes");
    tp = p.tape;
  }
  if (tp == nullptr) return out;
  std::vector<int> nodes;
  std::vector<int> row_counts;
  for (const Tensor& p : parts) {
    nodes.push_back(p.on_tape() ? p.node : -1);
    row_counts.push_back(p.shape[0]);
  }
  out.tape = tp;
  out.node = tp->record("concat_rows", nodes, out.shape,
                        [nodes, row_counts, d](const Tensor& g, Tape& t) {
                          int r = 0;
                          for (size_t i = 0; i < nodes.size(); ++i) {
                            int rows = row_counts[i];
                            if (nodes[i] >= 0) {
                              Tensor gp = Tensor::zeros({rows, d});
                              std::copy(g.data.begin() + size_t(r) * size_t(d),
                                        g.data.begin() + size_t(r + rows) * size_t(d),
                                        gp.data.begin());
                              t.accumulate(nodes[i], gp);
                            }
                            r += rows;
                          }
                        });
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.shape[0] == b.shape[0],
          "concat_cols: need matching row counts, got " + shape_str(a.shape) + " and " +
              shape_str(b.shape));
  int n = a.shape[0], da = a.shape[1], db = b.shape[1];
  Tensor out = Tensor::zeros({n, da + db});
  for (int i = 0; i < n; ++i) {
    std::copy(a.data.begin() + size_t(i) * size_t(da), a.data.begin() + size_t(i + 1) * size_t(da),
              out.data.begin() + size_t(i) * size_t(da + db));
    std::copy(b.data.begin() + size_t(i) * size_t(db), b.data.begin() + size_t(i + 1) * size_t(db),
              out.data.begin() + size_t(i) * size_t(da + db) + size_t(da));
  }
  return finish(std::move(out), "concat_cols", {&a, &b}, [&] {
    int an = node_id(a), bn = node_id(b);
    return [an, bn, n, da, db](const Tensor& g, Tape& t) {
      if (an >= 0) {
        Tensor ga = Tensor::zeros({n, da});
        for (int i = 0; i < n; ++i)
          std::copy(g.data.begin() + size_t(i) * size_t(da + db),
                    g.data.begin() + size_t(i) * size_t(da + db) + size_t(da),
                    ga.data.begin() + size_t(i) * size_t(da));
        t.accumulate(an, ga);
      }
      if (bn >= 0) {
        Tensor gb = Tensor::zeros({n, db});
        for (int i = 0; i < n; ++i)
          std::copy(g.data.begin() + size_t(i) * size_t(da + db) + size_t(da),
                    g.data.begin() + size_t(i + 1) * size_t(da + db),
                    gb.data.begin() + size_t(i) * size_t(db));
        t.accumulate(bn, gb);
      }
    };
  });
}

Tensor slice_rows(const Tensor& t, int r0, int r1) {
  require(t.rank() >= 1, "slice_rows: rank >= 1 required");
  require(0 <= r0 && r0 < r1 && r1 <= t.shape[0],
          "slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
              ") out of bounds for " + shape_str(t.shape));
  int block = t.size() / t.shape[0];
  std::vector<int> out_shape = t.shape;
  out_shape[0] = r1 - r0;
  Tensor out(out_shape, std::vector<double>(t.data.begin() + size_t(r0) * size_t(block),
                                            t.data.begin() + size_t(r1) * size_t(block)));
  return finish(std::move(out), "slice_rows", {&t}, [&] {
    int tn = node_id(t);
    std::vector<int> tshape = t.shape;
    return [tn, tshape, r0, block](const Tensor& g, Tape& tp) {
      if (tn < 0) return;
      Tensor gt = Tensor::zeros(tshape);
      std::copy(g.data.begin(), g.data.end(), gt.data.begin() + size_t(r0) * size_t(block));
      tp.accumulate(tn, gt);
    };
  });
}

Tensor slice_cols(const Tensor& t, int c0, int c1) {
  require(t.rank() == 2, "slice_cols: rank-2 tensor required");
  require(0 <= c0 && c0 < c1 && c1 <= t.shape[1], "slice_cols: range out of bounds");
  int n = t.shape[0], d = t.shape[1], w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i)
    std::copy(t.data.begin() + size_t(i) * size_t(d) + size_t(c0),
              t.data.begin() + size_t(i) * size_t(d) + size_t(c1),
              out.data.begin() + size_t(i) * size_t(w));
  return finish(std::move(out), "slice_cols", {&t}, [&] {
    int tn = node_id(t);
    return [tn, n, d, c0, w](const Tensor& g, Tape& tp) {
      if (tn < 0) return;
      Tensor gt = Tensor::zeros({n, d});
      for (int i = 0; i < n; ++i)
        std::copy(g.data.begin() + size_t(i) * size_t(w), g.data.begin() + size_t(i + 1) * size_t(w),
                  gt.data.begin() + size_t(i) * size_t(d) + size_t(c0));
      tp.accumulate(tn, gt);
    };
  });
}

Tensor index_rows(const Tensor& t, const std::vector<int>& idx) {
  require(t.rank() >= 1, "index_rows: rank >= 1 required");
  int block = t.size() / t.shape[0];
  for (int i : idx)
    require(0 <= i && i < t.shape[0], "index_rows: index " + std::to_string(i) + " out of bounds");
  std::vector<int> out_shape = t.shape;
  out_shape[0] = int(idx.size());
  Tensor out = Tensor::zeros(out_shape);
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(t.data.begin() + size_t(idx[r]) * size_t(block),
              t.data.begin() + size_t(idx[r] + 1) * size_t(block),
              out.data.begin() + r * size_t(block));
  return finish(std::move(out), "index_rows", {&t}, [&] {
    int tn = node_id(t);
    std::vector<int> tshape = t.shape;
    std::vector<int> iv = idx;
    return [tn, tshape, iv, block](const Tensor& g, Tape& tp) {
      if (tn < 0) return;
      Tensor gt = Tensor::zeros(tshape);
      for (size_t r = 0; r < iv.size(); ++r)
        for (int j = 0; j < block; ++j)
          gt.data[size_t(iv[r]) * size_t(block) + size_t(j)] += g.data[r * size_t(block) + size_t(j)];
      tp.accumulate(tn, gt);
    };
  });
}

Tensor gather(const Tensor& t, const std::vector<int>& idx) {
  for (int i : idx)
    require(0 <= i && i < t.size(), "gather: index " + std::to_string(i) + " out of bounds");
  Tensor out = Tensor::zeros({int(idx.size())});
  for (size_t r = 0; r < idx.size(); ++r) out[int(r)] = t[idx[r]];
  return finish(std::move(out), "gather", {&t}, [&] {
    int tn = node_id(t);
    std::vector<int> tshape = t.shape;
    std::vector<int> iv = idx;
    return [tn, tshape, iv](const Tensor& g, Tape& tp) {
      if (tn < 0) return;
      Tensor gt = Tensor::zeros(tshape);
      for (size_t r = 0; r < iv.size(); ++r) gt[iv[r]] += g[int(r)];
      tp.accumulate(tn, gt);
    };
  });
}

Tensor scatter_linear(const Tensor& src, const std::vector<ScatterEntry>& entries,
                      const std::vector<int>& out_shape) {
  Tensor out = Tensor::zeros(out_shape);
  for (const auto& e : entries) {
    require(0 <= e.src && e.src < src.size(), "scatter_linear: src index out of bounds");
    require(0 <= e.dst && e.dst < out.size(), "scatter_linear: dst index out of bounds");
    out[e.dst] += e.coeff * src[e.src];
  }
  return finish(std::move(out), "scatter_linear", {&src}, [&] {
    int sn = node_id(src);
    std::vector<int> sshape = src.shape;
    std::vector<ScatterEntry> ev = entries;
    return [sn, sshape, ev](const Tensor& g, Tape& tp) {
      if (sn < 0) return;
      Tensor gs = Tensor::zeros(sshape);
      for (const auto& e : ev) gs[e.src] += e.coeff * g[e.dst];
      tp.accumulate(sn, gs);
    };
  });
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
  require(scores.rank() == 3, "masked_softmax: scores must be [heads, q, k], got " +
                                  shape_str(scores.shape));
  int h = scores.shape[0], q = scores.shape[1], k = scores.shape[2];
  require(mask.q == q && mask.k == k, "masked_softmax: mask is " + std::to_string(mask.q) + "x" +
                                          std::to_string(mask.k) + ", scores are " +
                                          shape_str(scores.shape));
  for (int r = 0; r < q; ++r) {
    bool any = false;
    for (int c = 0; c < k; ++c) any = any || mask.at(r, c);
    if (!any) throw ContractError("masked_softmax: mask row " + std::to_string(r) + " allows no keys");
  }
  Tensor out = Tensor::zeros(scores.shape);
  for (int hh = 0; hh < h; ++hh) {
    for (int r = 0; r < q; ++r) {
      const double* srow = &scores.data[(size_t(hh) * size_t(q) + size_t(r)) * size_t(k)];
      double* orow = &out.data[(size_t(hh) * size_t(q) + size_t(r)) * size_t(k)];
      double mx = -1e300;
      for (int c = 0; c < k; ++c)
        if (mask.at(r, c) && srow[c] > mx) mx = srow[c];
      double z = 0.0;
      for (int c = 0; c < k; ++c) {
        if (mask.at(r, c)) {
          orow[c] = std::exp(srow[c] - mx);
          z += orow[c];
        }
      }
      for (int c = 0; c < k; ++c)
        if (mask.at(r, c)) orow[c] /= z;
    }
  }
  Tensor ov = out.detached();
  return finish(std::move(out), "masked_softmax", {&scores}, [&] {
    int sn = node_id(scores);
    return [sn, ov, h, q, k](const Tensor& g, Tape& tp) {
      if (sn < 0) return;
      Tensor gs = Tensor::zeros(ov.shape);
      for (int hh = 0; hh < h; ++hh) {
        for (int r = 0; r < q; ++r) {
          size_t base = (size_t(hh) * size_t(q) + size_t(r)) * size_t(k);
          double dot = 0.0;
          for (int c = 0; c < k; ++c) dot += g.data[base + size_t(c)] * ov.data[base + size_t(c)];
          for (int c = 0; c < k; ++c)
            gs.data[base + size_t(c)] = ov.data[base + size_t(c)] * (g.data[base + size_t(c)] - dot);
        }
      }
      tp.accumulate(sn, gs);
    };
  });
}

namespace {
constexpr double kLayerNormEps = 1e-5;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require(x.rank() == 2, "layer_norm: rank-2 input required, got " + shape_str(x.shape));
  int n = x.shape[0], d = x.shape[1];
  require(d >= 2, "layer_norm: needs feature dim >= 2, got " + std::to_string(d));
  require(gain.rank() == 1 && gain.shape[0] == d, "layer_norm: gain must be [d]");
  require(bias.rank() == 1 && bias.shape[0] == d, "layer_norm: bias must be [d]");
  Tensor out = Tensor::zeros({n, d});
  Tensor xhat = Tensor::zeros({n, d});
  std::vector<double> inv_sigma(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* row = &x.data[size_t(i) * size_t(d)];
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[size_t(i)] = is;
    for (int j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * is;
      xhat.data[size_t(i) * size_t(d) + size_t(j)] = xh;
      out.data[size_t(i) * size_t(d) + size_t(j)] = xh * gain[j] + bias[j];
    }
  }
  return finish(std::move(out), "layer_norm", {&x, &gain, &bias}, [&] {
    int xn = node_id(x), gn = node_id(gain), bn = node_id(bias);
    Tensor xh = xhat.detached();
    Tensor gv = gain.detached();
    std::vector<double> is = inv_sigma;
    return [xn, gn, bn, xh, gv, is, n, d](const Tensor& g, Tape& tp) {
      if (gn >= 0) {
        Tensor gg = Tensor::zeros({d});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gg[j] += g.data[size_t(i) * size_t(d) + size_t(j)] * xh.data[size_t(i) * size_t(d) + size_t(j)];
        tp.accumulate(gn, gg);
      }
      if (bn >= 0) {
        Tensor gb = Tensor::zeros({d});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gb[j] += g.data[size_t(i) * size_t(d) + size_t(j)];
        tp.accumulate(bn, gb);
      }
      if (xn >= 0) {
        Tensor gx = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i) {
          size_t base = size_t(i) * size_t(d);
          double m1 = 0.0, m2 = 0.0;  // mean(dy*g), mean(dy*g*xhat)
          for (int j = 0; j < d; ++j) {
            double dy = g.data[base + size_t(j)] * gv[j];
            m1 += dy;
            m2 += dy * xh.data[base + size_t(j)];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            double dy = g.data[base + size_t(j)] * gv[j];
            gx.data[base + size_t(j)] = is[size_t(i)] * (dy - m1 - xh.data[base + size_t(j)] * m2);
          }
        }
        tp.accumulate(xn, gx);
      }
    };
  });
}

Tensor bilinear_sample(const Tensor& feature, const Tensor& coords) {
  require(feature.rank() == 3, "bilinear_sample: feature must be [C, H, W]");
  require(coords.rank() == 2 && coords.shape[1] == 2, "bilinear_sample: coords must be [n, 2]");
  int C = feature.shape[0], H = feature.shape[1], W = feature.shape[2];
  int n = coords.shape[0];
  Tensor out = Tensor::zeros({n, C});
  // Saved per point: x0, y0, wx, wy and clamp indicators for the coord gradient.
  std::vector<int> x0s(n), y0s(n);
  std::vector<double> wxs(n), wys(n), dxs(n), dys(n);
  for (int i = 0; i < n; ++i) {
    double cx = coords.data[size_t(i) * 2];
    double cy = coords.data[size_t(i) * 2 + 1];
    double px = (cx + 1.0) * 0.5 * double(W - 1);
    double py = (cy + 1.0) * 0.5 * double(H - 1);
    double dpx = 0.5 * double(W - 1);  // d(px)/d(cx), zeroed when clamped
    double dpy = 0.5 * double(H - 1);
    if (px <= 0.0) { px = 0.0; dpx = 0.0; }
    if (px >= double(W - 1)) { px = double(W - 1); dpx = 0.0; }
    if (py <= 0.0) { py = 0.0; dpy = 0.0; }
    if (py >= double(H - 1)) { py = double(H - 1); dpy = 0.0; }
    int x0 = std::min(int(px), W >= 2 ? W - 2 : 0);
    int y0 = std::min(int(py), H >= 2 ? H - 2 : 0);
    double wx = px - double(x0);
    double wy = py - double(y0);
    x0s[size_t(i)] = x0;
    y0s[size_t(i)] = y0;
    wxs[size_t(i)] = wx;
    wys[size_t(i)] = wy;
    dxs[size_t(i)] = dpx;
    dys[size_t(i)] = dpy;
    int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    for (int c = 0; c < C; ++c) {
      size_t plane = size_t(c) * size_t(H) * size_t(W);
      double f00 = feature.data[plane + size_t(y0) * size_t(W) + size_t(x0)];
      double f01 = feature.data[plane + size_t(y0) * size_t(W) + size_t(x1)];
      double f10 = feature.data[plane + size_t(y1) * size_t(W) + size_t(x0)];
      double f11 = feature.data[plane + size_t(y1) * size_t(W) + size_t(x1)];
      out.data[size_t(i) * size_t(C) + size_t(c)] =
          (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11);
    }
  }
  return finish(std::move(out), "bilinear_sample", {&feature, &coords}, [&] {
    int fn = node_id(feature), cn = node_id(coords);
    Tensor fv = feature.detached();
    return [fn, cn, fv, x0s, y0s, wxs, wys, dxs, dys, C, H, W, n](const Tensor& g, Tape& tp) {
      Tensor gf = (fn >= 0) ? Tensor::zeros({C, H, W}) : Tensor{};
      Tensor gc = (cn >= 0) ? Tensor::zeros({n, 2}) : Tensor{};
      for (int i = 0; i < n; ++i) {
        int x0 = x0s[size_t(i)], y0 = y0s[size_t(i)];
        int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        double wx = wxs[size_t(i)], wy = wys[size_t(i)];
        for (int c = 0; c < C; ++c) {
          double go = g.data[size_t(i) * size_t(C) + size_t(c)];
          size_t plane = size_t(c) * size_t(H) * size_t(W);
          if (fn >= 0) {
            gf.data[plane + size_t(y0) * size_t(W) + size_t(x0)] += go * (1 - wy) * (1 - wx);
            gf.data[plane + size_t(y0) * size_t(W) + size_t(x1)] += go * (1 - wy) * wx;
            gf.data[plane + size_t(y1) * size_t(W) + size_t(x0)] += go * wy * (1 - wx);
            gf.data[plane + size_t(y1) * size_t(W) + size_t(x1)] += go * wy * wx;
          }
          if (cn >= 0) {
            double f00 = fv.data[plane + size_t(y0) * size_t(W) + size_t(x0)];
            double f01 = fv.data[plane + size_t(y0) * size_t(W) + size_t(x1)];
            double f10 = fv.data[plane + size_t(y1) * size_t(W) + size_t(x0)];
            double f11 = fv.data[plane + size_t(y1) * size_t(W) + size_t(x1)];
            double dpx = (1 - wy) * (f01 - f00) + wy * (f11 - f10);
            double dpy = (1 - wx) * (f10 - f00) + wx * (f11 - f01);
            gc.data[size_t(i) * 2] += go * dpx * dxs[size_t(i)];
            gc.data[size_t(i) * 2 + 1] += go * dpy * dys[size_t(i)];
          }
        }
      }
      if (fn >= 0) tp.accumulate(fn, gf);
      if (cn >= 0) tp.accumulate(cn, gc);
    };
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require(input.rank() == 3, "conv2d: input must be [Cin, H, W]");
  require(weight.rank() == 4, "conv2d: weight must be [Cout, Cin, kh, kw]");
  require(bias.rank() == 1, "conv2d: bias must be [Cout]");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride or pad");
  int Cin = input.shape[0], H = input.shape[1], W = input.shape[2];
  int Cout = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3];
  require(weight.shape[1] == Cin, "conv2d: weight Cin mismatch");
  require(bias.shape[0] == Cout, "conv2d: bias Cout mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  Tensor out = Tensor::zeros({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias[co];
        for (int ci = 0; ci < Cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            int y = oy * stride - pad + ky;
            if (y < 0 || y >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int x = ox * stride - pad + kx;
              if (x < 0 || x >= W) continue;
              acc += input.data[(size_t(ci) * size_t(H) + size_t(y)) * size_t(W) + size_t(x)] *
                     weight.data[((size_t(co) * size_t(Cin) + size_t(ci)) * size_t(kh) + size_t(ky)) *
                                     size_t(kw) + size_t(kx)];
            }
          }
        }
        out.data[(size_t(co) * size_t(Ho) + size_t(oy)) * size_t(Wo) + size_t(ox)] = acc;
      }
    }
  }
  return finish(std::move(out), "conv2d", {&input, &weight, &bias}, [&] {
    int in_n = node_id(input), w_n = node_id(weight), b_n = node_id(bias);
    Tensor iv = input.detached(), wv = weight.detached();
    return [in_n, w_n, b_n, iv, wv, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad](const Tensor& g,
                                                                                  Tape& tp) {
      Tensor gi = (in_n >= 0) ? Tensor::zeros({Cin, H, W}) : Tensor{};
      Tensor gw = (w_n >= 0) ? Tensor::zeros({Cout, Cin, kh, kw}) : Tensor{};
      Tensor gb = (b_n >= 0) ? Tensor::zeros({Cout}) : Tensor{};
      for (int co = 0; co < Cout; ++co) {
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            double go = g.data[(size_t(co) * size_t(Ho) + size_t(oy)) * size_t(Wo) + size_t(ox)];
            if (b_n >= 0) gb[co] += go;
            if (go == 0.0) continue;
            for (int ci = 0; ci < Cin; ++ci) {
              for (int ky = 0; ky < kh; ++ky) {
                int y = oy * stride - pad + ky;
                if (y < 0 || y >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int x = ox * stride - pad + kx;
                  if (x < 0 || x >= W) continue;
                  size_t ii = (size_t(ci) * size_t(H) + size_t(y)) * size_t(W) + size_t(x);
                  size_t wi = ((size_t(co) * size_t(Cin) + size_t(ci)) * size_t(kh) + size_t(ky)) *
                                  size_t(kw) + size_t(kx);
                  if (in_n >= 0) gi.data[ii] += go * wv.data[wi];
                  if (w_n >= 0) gw.data[wi] += go * iv.data[ii];
                }
              }
            }
          }
        }
      }
      if (in_n >= 0) tp.accumulate(in_n, gi);
      if (w_n >= 0) tp.accumulate(w_n, gw);
      if (b_n >= 0) tp.accumulate(b_n, gb);
    };
  });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                        int pad) {
  require(input.rank() == 3, "conv_transpose2d: input must be [Cin, H, W]");
  require(weight.rank() == 4, "conv_transpose2d: weight must be [Cin, Cout, kh, kw]");
  require(bias.rank() == 1, "conv_transpose2d: bias must be [Cout]");
  require(stride >= 1 && pad >= 0, "conv_transpose2d: bad stride or pad");
  int Cin = input.shape[0], H = input.shape[1], W = input.shape[2];
  int Cout = weight.shape[1], kh = weight.shape[2], kw = weight.shape[3];
  require(weight.shape[0] == Cin, "conv_transpose2d: weight Cin mismatch");
  require(bias.shape[0] == Cout, "conv_transpose2d: bias Cout mismatch");
  int Ho = (H - 1) * stride - 2 * pad + kh;
  int Wo = (W - 1) * stride - 2 * pad + kw;
  require(Ho >= 1 && Wo >= 1, "conv_transpose2d: empty output");
  Tensor out = Tensor::zeros({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co)
    for (int i = 0; i < Ho * Wo; ++i) out.data[size_t(co) * size_t(Ho) * size_t(Wo) + size_t(i)] = bias[co];
  for (int ci = 0; ci < Cin; ++ci) {
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) {
        double inv = input.data[(size_t(ci) * size_t(H) + size_t(h)) * size_t(W) + size_t(w)];
        if (inv == 0.0) continue;
        for (int co = 0; co < Cout; ++co) {
          for (int ky = 0; ky < kh; ++ky) {
            int y = h * stride - pad + ky;
            if (y < 0 || y >= Ho) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int x = w * stride - pad + kx;
              if (x < 0 || x >= Wo) continue;
              out.data[(size_t(co) * size_t(Ho) + size_t(y)) * size_t(Wo) + size_t(x)] +=
                  inv * weight.data[((size_t(ci) * size_t(Cout) + size_t(co)) * size_t(kh) +
                                     size_t(ky)) * size_t(kw) + size_t(kx)];
            }
          }
        }
      }
    }
  }
  return finish(std::move(out), "conv_transpose2d", {&input, &weight, &bias}, [&] {
    int in_n = node_id(input), w_n = node_id(weight), b_n = node_id(bias);
    Tensor iv = input.detached(), wv = weight.detached();
    return [in_n, w_n, b_n, iv, wv, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad](const Tensor& g,
                                                                                  Tape& tp) {
      Tensor gi = (in_n >= 0) ? Tensor::zeros({Cin, H, W}) : Tensor{};
      Tensor gw = (w_n >= 0) ? Tensor::zeros({Cin, Cout, kh, kw}) : Tensor{};
      Tensor gb = (b_n >= 0) ? Tensor::zeros({Cout}) : Tensor{};
      if (b_n >= 0) {
        for (int co = 0; co < Cout; ++co)
          for (int i = 0; i < Ho * Wo; ++i)
            gb[co] += g.data[size_t(co) * size_t(Ho) * size_t(Wo) + size_t(i)];
      }
      for (int ci = 0; ci < Cin; ++ci) {
        for (int h = 0; h < H; ++h) {
          for (int w = 0; w < W; ++w) {
            size_t ii = (size_t(ci) * size_t(H) + size_t(h)) * size_t(W) + size_t(w);
            for (int co = 0; co < Cout; ++co) {
              for (int ky = 0; ky < kh; ++ky) {
                int y = h * stride - pad + ky;
                if (y < 0 || y >= Ho) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int x = w * stride - pad + kx;
                  if (x < 0 || x >= Wo) continue;
                  size_t oi = (size_t(co) * size_t(Ho) + size_t(y)) * size_t(Wo) + size_t(x);
                  size_t wi = ((size_t(ci) * size_t(Cout) + size_t(co)) * size_t(kh) + size_t(ky)) *
                                  size_t(kw) + size_t(kx);
                  if (in_n >= 0) gi.data[ii] += g.data[oi] * wv.data[wi];
                  if (w_n >= 0) gw.data[wi] += g.data[oi] * iv.data[ii];
                }
              }
            }
          }
        }
      }
      if (in_n >= 0) tp.accumulate(in_n, gi);
      if (w_n >= 0) tp.accumulate(w_n, gw);
      if (b_n >= 0) tp.accumulate(b_n, gb);
    };
  });
}

}  // namespace handrec::ad
