#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "handrec/gradcheck.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/hierarchy.hpp"
#include "handrec/ops.hpp"
#include "handrec/rng.hpp"
#include "oracles.hpp"

using namespace handrec;
using namespace handrec::ad;
using namespace handrec::hier;

namespace {

Tensor rand_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void check_convex_rows(const SparseMatrix& u) {
  std::vector<double> row_sum(size_t(u.rows), 0.0);
  for (const auto& e : u.entries) {
    CHECK(e.value >= 0.0);
    row_sum[size_t(e.row)] += e.value;
  }
  for (int r = 0; r < u.rows; ++r) CHECK(std::fabs(row_sum[size_t(r)] - 1.0) <= 1e-9);
}

// Path-graph stand-in: a thin triangle strip whose unique edges include the
// path 0-1-2-3. Used where only the graph structure matters.
hand::HandModel tiny_model(int n) { return hand::synthesize_model(3, n, 7); }

}  // namespace

TEST_CASE("four-vertex path graph coarsens to two levels") {
  MeshHierarchy h = build_hierarchy(4, {{0, 1}, {1, 2}, {2, 3}}, {2, 4});
  REQUIRE(h.levels.size() == 2);
  CHECK(h.levels[0].count == 2);
  CHECK(h.levels[1].count == 4);
  REQUIRE(h.upsamplers.size() == 1);
  check_convex_rows(h.upsamplers[0]);
}

TEST_CASE("tiny mesh coarsens with convex upsampler rows") {
  hand::HandModel m = tiny_model(12);
  MeshHierarchy h = build_hierarchy(m, {3, 6, 12});
  REQUIRE(h.levels.size() == 3);
  CHECK(h.levels[0].count == 3);
  CHECK(h.levels[1].count == 6);
  CHECK(h.levels[2].count == 12);
  REQUIRE(h.upsamplers.size() == 2);
  CHECK(h.upsamplers[0].rows == 6);
  CHECK(h.upsamplers[0].cols == 3);
  CHECK(h.upsamplers[1].rows == 12);
  CHECK(h.upsamplers[1].cols == 6);
  for (const auto& u : h.upsamplers) check_convex_rows(u);
}

TEST_CASE("synthetic 98-vertex mesh reaches counts 24, 49, 98") {
  hand::HandModel m = hand::synthesize_model(42, 98, 16);
  MeshHierarchy h = build_hierarchy(m, {24, 49, 98});
  CHECK(h.levels[0].count == 24);
  CHECK(h.levels[1].count == 49);
  CHECK(h.levels[2].count == 98);
  for (const auto& u : h.upsamplers) check_convex_rows(u);
}

TEST_CASE("desk-scale counts 4, 8, 16, 98 are reachable") {
  hand::HandModel m = hand::synthesize_model(42, 98, 16);
  MeshHierarchy h = build_hierarchy(m, {4, 8, 16, 98});
  REQUIRE(h.levels.size() == 4);
  CHECK(h.levels[0].count == 4);
  CHECK(h.levels[3].count == 98);
  REQUIRE(h.upsamplers.size() == 3);
  CHECK(h.upsamplers[2].rows == 98);
  CHECK(h.upsamplers[2].cols == 16);
  for (const auto& u : h.upsamplers) check_convex_rows(u);
}

TEST_CASE("full-scale topology reaches counts 63, 126, 252, 778") {
  hand::HandModel m = hand::synthesize_model(42, 778, 16);
  MeshHierarchy h = build_hierarchy(m, {63, 126, 252, 778});
  REQUIRE(h.levels.size() == 4);
  CHECK(h.levels[0].count == 63);
  CHECK(h.levels[1].count == 126);
  CHECK(h.levels[2].count == 252);
  CHECK(h.levels[3].count == 778);
  for (const auto& u : h.upsamplers) check_convex_rows(u);
}

TEST_CASE("hierarchy construction is deterministic") {
  hand::HandModel m = hand::synthesize_model(42, 98, 16);
  MeshHierarchy a = build_hierarchy(m, {4, 8, 16, 98});
  MeshHierarchy b = build_hierarchy(m, {4, 8, 16, 98});
  for (size_t i = 0; i < a.levels.size(); ++i) {
    CHECK(a.levels[i].edges == b.levels[i].edges);
    CHECK(a.levels[i].laplacian.data == b.levels[i].laplacian.data);
  }
  for (size_t i = 0; i < a.upsamplers.size(); ++i) {
    REQUIRE(a.upsamplers[i].entries.size() == b.upsamplers[i].entries.size());
    for (size_t k = 0; k < a.upsamplers[i].entries.size(); ++k) {
      CHECK(a.upsamplers[i].entries[k].row == b.upsamplers[i].entries[k].row);
      CHECK(a.upsamplers[i].entries[k].col == b.upsamplers[i].entries[k].col);
      CHECK(a.upsamplers[i].entries[k].value == b.upsamplers[i].entries[k].value);
    }
  }
}

TEST_CASE("level count contracts are enforced") {
  hand::HandModel m = tiny_model(12);
  CHECK_THROWS_AS(build_hierarchy(m, {6, 6, 12}), ValidationError);
  CHECK_THROWS_AS(build_hierarchy(m, {3, 6, 11}), ValidationError);
  CHECK_THROWS_AS(build_hierarchy(m, {}), ValidationError);
}

TEST_CASE("scaled Laplacian is symmetric with spectrum inside the unit interval") {
  hand::HandModel m = hand::synthesize_model(42, 98, 16);
  MeshHierarchy h = build_hierarchy(m, {24, 49, 98});
  for (const auto& lvl : h.levels) {
    const Tensor& l = lvl.laplacian;
    for (int r = 0; r < lvl.count; ++r)
      for (int c = 0; c < r; ++c) CHECK(l.at(r, c) == l.at(c, r));
    // Power iteration on a symmetric matrix converges to the largest |lambda|.
    Rng rng(5);
    Tensor v = rand_tensor({lvl.count, 1}, rng);
    double lambda = 0.0;
    for (int it = 0; it < 300; ++it) {
      Tensor w = matmul(l, v);
      double norm = 0.0;
      for (double x : w.data) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-30) break;
      for (double& x : w.data) x /= norm;
      lambda = norm;
      v = w;
    }
    CHECK(lambda <= 1.0 + 1e-9);
  }
}

TEST_CASE("isolated vertices produce zero Laplacian rows") {
  Tensor l = scaled_laplacian(3, {{0, 1}});
  for (int c = 0; c < 3; ++c) {
    CHECK(l.at(2, c) == 0.0);
    CHECK(l.at(c, 2) == 0.0);
  }
  CHECK(l.at(0, 1) == -1.0);
}

TEST_CASE("upsampling matches a dense product and is differentiable") {
  Rng rng(7);
  hand::HandModel m = tiny_model(12);
  MeshHierarchy h = build_hierarchy(m, {6, 12});
  const SparseMatrix& u = h.upsamplers[0];

  Tensor x = rand_tensor({6, 5}, rng);
  Tensor dense = Tensor::zeros({12, 6});
  for (const auto& e : u.entries) dense.at(e.row, e.col) = e.value;
  Tensor got = upsample_vertices(u, x);
  Tensor want = matmul(dense, x);
  for (int i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= 1e-12);

  // Identity upsampler leaves tokens unchanged.
  SparseMatrix eye;
  eye.rows = eye.cols = 6;
  for (int i = 0; i < 6; ++i) eye.entries.push_back({i, i, 1.0});
  Tensor same = upsample_vertices(eye, x);
  CHECK(same.data == x.data);

  // Convex rows map a constant field to the same constant.
  Tensor ones = Tensor::full({6, 5}, 3.25);
  Tensor lifted = upsample_vertices(u, ones);
  for (double vv : lifted.data) CHECK(std::fabs(vv - 3.25) <= 1e-12);

  Tensor probe = rand_tensor({12, 5}, rng);
  // Linear map: the analytic gradient is exact, the bound covers FD rounding.
  auto f = [&](Tape&, const Tensor& t) { return sum(mul(upsample_vertices(u, t), probe)); };
  CHECK(grad_check(f, x, 1e-5) <= 1e-7);
}

TEST_CASE("hierarchy cache round-trips through JSON") {
  hand::HandModel m = hand::synthesize_model(42, 98, 16);
  MeshHierarchy h = build_hierarchy(m, {4, 8, 16, 98});
  const std::string path = "test_hierarchy_cache.json";
  save_hierarchy(h, path);
  MeshHierarchy r = load_hierarchy(path);
  REQUIRE(r.levels.size() == h.levels.size());
  for (size_t i = 0; i < h.levels.size(); ++i) {
    CHECK(r.levels[i].count == h.levels[i].count);
    CHECK(r.levels[i].edges == h.levels[i].edges);
    CHECK(r.levels[i].laplacian.data == h.levels[i].laplacian.data);
  }
  REQUIRE(r.upsamplers.size() == h.upsamplers.size());
  for (size_t i = 0; i < h.upsamplers.size(); ++i) {
    REQUIRE(r.upsamplers[i].entries.size() == h.upsamplers[i].entries.size());
    for (size_t k = 0; k < h.upsamplers[i].entries.size(); ++k) {
      CHECK(r.upsamplers[i].entries[k].row == h.upsamplers[i].entries[k].row);
      CHECK(r.upsamplers[i].entries[k].col == h.upsamplers[i].entries[k].col);
      CHECK(r.upsamplers[i].entries[k].value == h.upsamplers[i].entries[k].value);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("running out of edges raises a hierarchy error") {
  // Two disconnected islands cannot merge into one cluster.
  CHECK_THROWS_AS(build_hierarchy(6, {{0, 1}, {1, 2}, {3, 4}, {4, 5}}, {1, 6}), ValidationError);
}
