#include "handrec/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "handrec/errors.hpp"
#include "handrec/ops.hpp"

namespace handrec::loss {

using ad::Tensor;

namespace {

void check_hand(const HandLossInputs& h, const char* side) {
  if (!h.model) throw ContractError(std::string("loss inputs for the ") + side +
                                    " hand are missing the hand model");
  if (h.pred_vertices.rank() != 2 || h.pred_vertices.shape[1] != 3 ||
      h.pred_vertices.shape != h.gt_vertices.shape ||
      h.pred_vertices.shape[0] != h.model->vertex_count())
    throw ContractError(std::string("predicted and ground-truth ") + side +
                        " meshes must both be [vertex_count, 3]");
}

void check_params(const HandLossInputs& h, const char* side) {
  const int pose = h.model->pose_dim();
  auto bad = [&](const Tensor& t, int len) {
    return t.rank() != 1 || t.shape[0] != len;
  };
  if (bad(h.pred_theta, pose) || bad(h.gt_theta, pose) || bad(h.pred_beta, hand::kShapeDim) ||
      bad(h.gt_beta, hand::kShapeDim))
    throw ContractError(std::string("pose/shape parameters for the ") + side +
                        " hand must be [" + std::to_string(pose) + "] and [" +
                        std::to_string(hand::kShapeDim) + "]");
}

// Mean over rows of the per-row 1-norm of a - b.
Tensor mean_l1_rows(const Tensor& a, const Tensor& b) {
  return ad::scale(ad::sum(ad::abs_(ad::sub(a, b))), 1.0 / double(a.shape[0]));
}

Tensor mean_abs(const Tensor& a, const Tensor& b) { return ad::mean(ad::abs_(ad::sub(a, b))); }

// Guarded Euclidean row lengths of an n x 3 tensor, as [n, 1].
Tensor row_lengths(const Tensor& rows) {
  Tensor sq = ad::mul(rows, rows);
  Tensor ones = Tensor::full({3, 1}, 1.0);
  return ad::sqrt_(ad::add_scalar(ad::matmul(sq, ones), 1e-12));
}

// One linear gather producing difference rows to[i] - from[i] of the mesh.
Tensor difference_rows(const Tensor& vertices, const std::vector<int>& from,
                       const std::vector<int>& to) {
  std::vector<ad::ScatterEntry> entries;
  entries.reserve(from.size() * 6);
  for (size_t e = 0; e < from.size(); ++e)
    for (int c = 0; c < 3; ++c) {
      entries.push_back({to[e] * 3 + c, int(e) * 3 + c, 1.0});
      entries.push_back({from[e] * 3 + c, int(e) * 3 + c, -1.0});
    }
  return ad::scatter_linear(vertices, entries, {int(from.size()), 3});
}

Tensor unit_rows(const Tensor& rows) {
  Tensor len = row_lengths(rows);
  Tensor inv = ad::div(Tensor::full(len.shape, 1.0), len);
  return ad::mul_colvec(rows, ad::reshape(inv, {rows.shape[0]}));
}

ad::Tensor row_dots(const Tensor& a, const Tensor& b) {
  return ad::matmul(ad::mul(a, b), Tensor::full({3, 1}, 1.0));
}

struct ManoBundle {
  Tensor l_p;
  Tensor l_v_mano;
  Tensor l_consist;
};

ManoBundle mano_terms(const HandLossInputs& h) {
  hand::ManoOutput out =
      hand::mano_forward(*h.model, h.pred_theta, h.pred_beta, Tensor::zeros({3}));
  ManoBundle bundle;
  bundle.l_p = ad::add(mean_abs(h.pred_theta, h.gt_theta), mean_abs(h.pred_beta, h.gt_beta));
  bundle.l_v_mano = mean_l1_rows(out.vertices, h.gt_vertices);
  bundle.l_consist = ad::add(mean_l1_rows(out.vertices, h.pred_vertices),
                             mean_l1_rows(hand::regress_joints(*h.model, out.vertices),
                                          hand::regress_joints(*h.model, h.pred_vertices)));
  return bundle;
}

}  // namespace

std::pair<Tensor, Tensor> vertex_joint_loss(const HandLossInputs& left,
                                            const HandLossInputs& right,
                                            const cam::Camera& camera) {
  check_hand(left, "left");
  check_hand(right, "right");
  auto per_hand = [&camera](const HandLossInputs& h) {
    Tensor v3 = mean_l1_rows(h.pred_vertices, h.gt_vertices);
    Tensor v2 = mean_l1_rows(cam::project(h.pred_vertices, camera),
                             cam::project(h.gt_vertices, camera));
    Tensor jp = hand::regress_joints(*h.model, h.pred_vertices);
    Tensor jg = hand::regress_joints(*h.model, h.gt_vertices);
    Tensor j3 = mean_l1_rows(jp, jg);
    Tensor j2 = mean_l1_rows(cam::project(jp, camera), cam::project(jg, camera));
    return std::pair<Tensor, Tensor>{ad::add(v3, v2), ad::add(j3, j2)};
  };
  auto [lv_l, lj_l] = per_hand(left);
  auto [lv_r, lj_r] = per_hand(right);
  return {ad::add(lv_l, lv_r), ad::add(lj_l, lj_r)};
}

Tensor normal_loss(const HandLossInputs& left, const HandLossInputs& right, int* degenerate) {
  check_hand(left, "left");
  check_hand(right, "right");
  int skipped = 0;
  int triples = 0;
  std::vector<Tensor> sums;
  for (const HandLossInputs* h : {&left, &right}) {
    hand::FaceNormals normals = hand::face_normals(h->gt_vertices, h->model->faces);
    skipped += normals.degenerate_count;
    std::vector<int> from, to;
    std::vector<double> normal_rows;
    for (size_t f = 0; f < h->model->faces.size(); ++f) {
      if (normals.degenerate[f]) continue;
      const auto& face = h->model->faces[f];
      const int corners[4] = {face[0], face[1], face[2], face[0]};
      for (int i = 0; i < 3; ++i) {
        from.push_back(corners[i]);
        to.push_back(corners[i + 1]);
        for (int c = 0; c < 3; ++c) normal_rows.push_back(normals.unit_normals[f][size_t(c)]);
      }
    }
    if (from.empty()) continue;
    triples += int(from.size());
    Tensor gt_normals = Tensor::zeros({int(from.size()), 3});
    gt_normals.data = normal_rows;
    Tensor edges = unit_rows(difference_rows(h->pred_vertices, from, to));
    sums.push_back(ad::sum(ad::abs_(row_dots(edges, gt_normals))));
  }
  if (degenerate) *degenerate = skipped;
  if (sums.empty()) return Tensor::scalar(0.0);
  Tensor total = sums[0];
  for (size_t i = 1; i < sums.size(); ++i) total = ad::add(total, sums[i]);
  return ad::scale(total, 1.0 / double(triples));
}

Tensor edge_loss(const HandLossInputs& left, const HandLossInputs& right) {
  check_hand(left, "left");
  check_hand(right, "right");
  auto per_hand = [](const HandLossInputs& h) {
    auto edges = hand::unique_edges(h.model->faces);
    std::vector<int> from, to;
    from.reserve(edges.size());
    to.reserve(edges.size());
    for (auto [a, b] : edges) {
      from.push_back(a);
      to.push_back(b);
    }
    Tensor lp = row_lengths(difference_rows(h.pred_vertices, from, to));
    Tensor lg = row_lengths(difference_rows(h.gt_vertices, from, to));
    return ad::scale(ad::sum(ad::abs_(ad::sub(lp, lg))), 1.0 / double(edges.size()));
  };
  return ad::add(per_hand(left), per_hand(right));
}

std::pair<Tensor, Tensor> mano_losses(const HandLossInputs& left, const HandLossInputs& right) {
  check_hand(left, "left");
  check_hand(right, "right");
  check_params(left, "left");
  check_params(right, "right");
  ManoBundle l = mano_terms(left);
  ManoBundle r = mano_terms(right);
  return {ad::add(l.l_p, r.l_p), ad::add(l.l_v_mano, r.l_v_mano)};
}

Tensor consistency_loss(const HandLossInputs& left, const HandLossInputs& right) {
  check_hand(left, "left");
  check_hand(right, "right");
  check_params(left, "left");
  check_params(right, "right");
  return ad::add(mano_terms(left).l_consist, mano_terms(right).l_consist);
}

LossTerms compute_losses(const HandLossInputs& left, const HandLossInputs& right,
                         const cam::Camera& camera) {
  check_hand(left, "left");
  check_hand(right, "right");
  check_params(left, "left");
  check_params(right, "right");
  LossTerms terms;
  auto [lv, lj] = vertex_joint_loss(left, right, camera);
  terms.l_v = lv;
  terms.l_j = lj;
  terms.l_n = normal_loss(left, right, &terms.degenerate_faces);
  terms.l_e = edge_loss(left, right);
  ManoBundle l = mano_terms(left);
  ManoBundle r = mano_terms(right);
  terms.l_p = ad::add(l.l_p, r.l_p);
  terms.l_v_mano = ad::add(l.l_v_mano, r.l_v_mano);
  terms.l_consist = ad::add(l.l_consist, r.l_consist);
  return terms;
}

namespace {

struct NamedTerm {
  const char* name;
  const Tensor* term;
  double weight;
};

std::vector<NamedTerm> named_terms(const LossTerms& terms, const LossWeights& w) {
  return {{"L_V", &terms.l_v, w.lambda_v},           {"L_J", &terms.l_j, w.lambda_j},
          {"L_N", &terms.l_n, w.lambda_n},           {"L_E", &terms.l_e, w.lambda_e},
          {"L_P", &terms.l_p, w.lambda_p},           {"L_Vmano", &terms.l_v_mano, w.lambda_v_mano},
          {"L_consist", &terms.l_consist, w.lambda_consist}};
}

}  // namespace

Tensor total_loss(const LossTerms& terms, const LossWeights& weights) {
  Tensor total = Tensor::scalar(0.0);
  for (const NamedTerm& t : named_terms(terms, weights)) {
    if (t.term->size() != 1)
      throw ContractError(std::string("loss term ") + t.name + " must be a scalar");
    if (!std::isfinite(t.term->scalar_value()))
      throw NumericError(std::string("loss term ") + t.name +
                         " is not finite; training must abort");
    total = ad::add(total, ad::scale(*t.term, t.weight));
  }
  return total;
}

LossReport report_of(const LossTerms& terms, const LossWeights& weights) {
  LossReport r;
  r.l_v = terms.l_v.scalar_value();
  r.l_j = terms.l_j.scalar_value();
  r.l_n = terms.l_n.scalar_value();
  r.l_e = terms.l_e.scalar_value();
  r.l_p = terms.l_p.scalar_value();
  r.l_v_mano = terms.l_v_mano.scalar_value();
  r.l_consist = terms.l_consist.scalar_value();
  r.degenerate_faces = terms.degenerate_faces;
  double total = 0.0;
  for (const NamedTerm& t : named_terms(terms, weights))
    total += t.weight * t.term->scalar_value();
  r.total = total;
  return r;
}

// ---- evaluation metrics ----

namespace {

using Vec3 = std::array<double, 3>;

std::vector<Vec3> value_joints(const hand::HandModel& model, const Tensor& mesh) {
  const Tensor& reg = model.joint_regressor;
  std::vector<Vec3> joints(size_t(model.joint_count()), Vec3{0, 0, 0});
  for (int j = 0; j < model.joint_count(); ++j)
    for (int v = 0; v < model.vertex_count(); ++v) {
      const double w = reg.at(j, v);
      if (w == 0.0) continue;
      for (int c = 0; c < 3; ++c)
        joints[size_t(j)][size_t(c)] += w * mesh.at(v, c);
    }
  return joints;
}

double dist3(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

MetricReport metrics(const HandMeshPair& left, const HandMeshPair& right,
                     const cam::Camera& camera) {
  std::vector<double> joint_errors_mm;
  double vertex_sum_mm = 0.0;
  int vertex_count = 0;
  double pixel_sum = 0.0;

  for (const HandMeshPair* h : {&left, &right}) {
    if (!h->model) throw ContractError("metrics require the hand model");
    if (h->pred.rank() != 2 || h->pred.shape[1] != 3 || h->pred.shape != h->gt.shape ||
        h->pred.shape[0] != h->model->vertex_count())
      throw ContractError("metrics require matching [vertex_count, 3] meshes");

    std::vector<Vec3> jp = value_joints(*h->model, h->pred);
    std::vector<Vec3> jg = value_joints(*h->model, h->gt);
    const Vec3 root_p = jp[0], root_g = jg[0];
    for (size_t j = 1; j < jp.size(); ++j) {
      Vec3 a{jp[j][0] - root_p[0], jp[j][1] - root_p[1], jp[j][2] - root_p[2]};
      Vec3 b{jg[j][0] - root_g[0], jg[j][1] - root_g[1], jg[j][2] - root_g[2]};
      joint_errors_mm.push_back(dist3(a, b) * 1000.0);
    }

    for (int v = 0; v < h->model->vertex_count(); ++v) {
      Vec3 a{h->pred.at(v, 0) - root_p[0], h->pred.at(v, 1) - root_p[1],
             h->pred.at(v, 2) - root_p[2]};
      Vec3 b{h->gt.at(v, 0) - root_g[0], h->gt.at(v, 1) - root_g[1],
             h->gt.at(v, 2) - root_g[2]};
      vertex_sum_mm += dist3(a, b) * 1000.0;

      const double dx = camera.s * (h->pred.at(v, 0) - h->gt.at(v, 0));
      const double dy = camera.s * (h->pred.at(v, 1) - h->gt.at(v, 1));
      pixel_sum += std::sqrt(dx * dx + dy * dy);
      ++vertex_count;
    }
  }

  MetricReport report;
  double joint_sum = 0.0;
  for (double e : joint_errors_mm) joint_sum += e;
  report.mpjpe_mm = joint_sum / double(joint_errors_mm.size());
  report.mpvpe_mm = vertex_sum_mm / double(vertex_count);
  report.proj2d_px = pixel_sum / double(vertex_count);

  std::vector<double> curve(101, 0.0);
  for (int k = 0; k <= 100; ++k) {
    const double threshold = 50.0 * double(k) / 100.0;
    int correct = 0;
    for (double e : joint_errors_mm)
      if (e <= threshold) ++correct;
    curve[size_t(k)] = double(correct) / double(joint_errors_mm.size());
  }
  double auc = 0.0;
  for (int k = 0; k + 1 <= 100; ++k) auc += 0.5 * (curve[size_t(k)] + curve[size_t(k) + 1]) * 0.5;
  report.pck_auc = auc / 50.0;
  return report;
}

}  // namespace handrec::loss
