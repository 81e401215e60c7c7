#include "handrec/hand_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "handrec/errors.hpp"
#include "handrec/ops.hpp"
#include "handrec/rng.hpp"
#include "json.hpp"

namespace handrec::hand {

using ad::Tensor;

namespace {

std::string row_sum_message(const char* field, int row, double sum) {
  std::ostringstream os;
  os << "hand model " << field << " row " << row << " sums to " << sum
     << " (expected 1 within 1e-9)";
  return os.str();
}

void check_rows_sum_to_one(const Tensor& t, const char* field) {
  for (int r = 0; r < t.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < t.cols(); ++c) s += t.at(r, c);
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError(row_sum_message(field, r, s));
  }
}

}  // namespace

void validate_model(const HandModel& m) {
  const int n = m.template_verts.rank() == 2 ? m.template_verts.shape[0] : 0;
  if (m.template_verts.rank() != 2 || m.template_verts.cols() != 3 || n < 3)
    throw ValidationError("hand model template_verts must be N x 3 with N >= 3, got " +
                          ad::shape_str(m.template_verts.shape));
  ad::check_finite(m.template_verts, "hand model template_verts");

  const int j = int(m.parents.size());
  if (j < 1) throw ValidationError("hand model parents is empty");
  if (m.parents[0] != -1) throw ValidationError("hand model parents[0] must be -1 (root)");
  for (int i = 1; i < j; ++i)
    if (m.parents[i] < 0 || m.parents[i] >= i)
      throw ValidationError("hand model parents[" + std::to_string(i) +
                            "] must name an earlier joint, got " + std::to_string(m.parents[i]));

  if (m.skin_weights.rank() != 2 || m.skin_weights.shape[0] != n || m.skin_weights.shape[1] != j)
    throw ValidationError("hand model skin_weights must be " + std::to_string(n) + " x " +
                          std::to_string(j) + ", got " + ad::shape_str(m.skin_weights.shape));
  ad::check_finite(m.skin_weights, "hand model skin_weights");
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < j; ++c)
      if (m.skin_weights.at(r, c) < 0.0)
        throw ValidationError("hand model skin_weights[" + std::to_string(r) + "][" +
                              std::to_string(c) + "] is negative");
  check_rows_sum_to_one(m.skin_weights, "skin_weights");

  if (m.joint_regressor.rank() != 2 || m.joint_regressor.shape[0] != j ||
      m.joint_regressor.shape[1] != n)
    throw ValidationError("hand model joint_regressor must be " + std::to_string(j) + " x " +
                          std::to_string(n) + ", got " + ad::shape_str(m.joint_regressor.shape));
  ad::check_finite(m.joint_regressor, "hand model joint_regressor");
  check_rows_sum_to_one(m.joint_regressor, "joint_regressor");

  if (m.shape_basis.rank() != 2 || m.shape_basis.shape[0] != 3 * n ||
      m.shape_basis.shape[1] != kShapeDim)
    throw ValidationError("hand model shape_basis must be " + std::to_string(3 * n) + " x " +
                          std::to_string(kShapeDim) + ", got " +
                          ad::shape_str(m.shape_basis.shape));
  ad::check_finite(m.shape_basis, "hand model shape_basis");

  if (m.faces.empty()) throw ValidationError("hand model faces is empty");
  for (size_t f = 0; f < m.faces.size(); ++f) {
    const auto& tri = m.faces[f];
    for (int v : tri)
      if (v < 0 || v >= n)
        throw ValidationError("hand model faces[" + std::to_string(f) +
                              "] references vertex " + std::to_string(v) + " outside [0, " +
                              std::to_string(n) + ")");
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2])
      throw ValidationError("hand model faces[" + std::to_string(f) + "] repeats a vertex");
  }
  std::string why;
  if (!is_edge_manifold(m.faces, &why))
    throw ValidationError("hand model faces are not edge-manifold: " + why);
}

HandModel mirrored(const HandModel& m) {
  HandModel out = m;
  for (int r = 0; r < out.template_verts.rows(); ++r)
    out.template_verts.at(r, 0) = -out.template_verts.at(r, 0);
  // Rows of the basis are (vertex, coord) pairs; coord 0 is x.
  for (int v = 0; v < m.vertex_count(); ++v)
    for (int k = 0; k < kShapeDim; ++k)
      out.shape_basis.at(3 * v + 0, k) = -out.shape_basis.at(3 * v + 0, k);
  for (auto& tri : out.faces) std::swap(tri[1], tri[2]);
  return out;
}

Tensor rodrigues(const Tensor& axis_angle) {
  if (axis_angle.size() != 3)
    throw ContractError("rodrigues expects a 3-vector, got " +
                            ad::shape_str(axis_angle.shape));
  Tensor w = axis_angle.rank() == 1 ? axis_angle : ad::reshape(axis_angle, {3});
  Tensor s = ad::sum(ad::mul(w, w));  // squared angle
  Tensor a, b;                        // sin(t)/t and (1 - cos(t))/t^2
  if (s.data[0] < 1e-16) {
    // Taylor forms; exact identity at w = 0.
    a = ad::add_scalar(ad::scale(s, -1.0 / 6.0), 1.0);
    b = ad::add_scalar(ad::scale(s, -1.0 / 24.0), 0.5);
  } else {
    Tensor theta = ad::sqrt_(s);
    a = ad::div(ad::sin_(theta), theta);
    // Half-angle form avoids the 1 - cos(t) cancellation at small angles.
    Tensor sh = ad::sin_(ad::scale(theta, 0.5));
    b = ad::div(ad::scale(ad::mul(sh, sh), 2.0), s);
  }
  // Cross-product matrix: K v = w x v.
  static const std::vector<ad::ScatterEntry> kSkew = {
      {2, 0 * 3 + 1, -1.0}, {1, 0 * 3 + 2, 1.0},  {2, 1 * 3 + 0, 1.0},
      {0, 1 * 3 + 2, -1.0}, {1, 2 * 3 + 0, -1.0}, {0, 2 * 3 + 1, 1.0},
  };
  Tensor k = ad::scatter_linear(w, kSkew, {3, 3});
  Tensor k2 = ad::matmul(k, k);
  return ad::add(Tensor::identity(3), ad::add(ad::smul(k, a), ad::smul(k2, b)));
}

ManoOutput mano_forward(const HandModel& m, const Tensor& theta, const Tensor& beta,
                        const Tensor& translation) {
  const int n = m.vertex_count();
  const int j = m.joint_count();
  if (theta.size() != 3 * j)
    throw ContractError("mano_forward theta must have " + std::to_string(3 * j) +
                            " entries, got " + ad::shape_str(theta.shape));
  if (beta.size() != kShapeDim)
    throw ContractError("mano_forward beta must have " + std::to_string(kShapeDim) +
                            " entries, got " + ad::shape_str(beta.shape));
  if (translation.size() != 3)
    throw ContractError("mano_forward translation must have 3 entries, got " +
                            ad::shape_str(translation.shape));

  Tensor theta_flat = theta.rank() == 1 ? theta : ad::reshape(theta, {3 * j});
  Tensor beta_col = ad::reshape(beta, {kShapeDim, 1});
  Tensor shaped = ad::add(m.template_verts,
                          ad::reshape(ad::matmul(m.shape_basis, beta_col), {n, 3}));
  Tensor rest = ad::matmul(m.joint_regressor, shaped);  // J x 3

  // Forward kinematics, row-vector convention: world = local * R^T + position.
  std::vector<Tensor> rot_world(j);   // 3 x 3
  std::vector<Tensor> offset(j);      // 1 x 3: position_j - rest_j * R_world_j^T
  const Tensor eye = Tensor::identity(3);
  for (int i = 0; i < j; ++i) {
    Tensor local = rodrigues(ad::slice_rows(theta_flat, 3 * i, 3 * i + 3));
    Tensor rest_i = ad::slice_rows(rest, i, i + 1);
    if (i == 0) {
      rot_world[0] = local;
      offset[0] = ad::matmul(rest_i, ad::sub(eye, ad::transpose(local)));
    } else {
      const int p = m.parents[i];
      rot_world[i] = ad::matmul(rot_world[p], local);
      // Telescoped so a rest pose yields exact zeros.
      offset[i] = ad::add(offset[p],
                          ad::matmul(rest_i, ad::sub(ad::transpose(rot_world[p]),
                                                     ad::transpose(rot_world[i]))));
    }
  }

  std::vector<Tensor> joint_rows(static_cast<size_t>(j));
  for (int i = 0; i < j; ++i)
    joint_rows[size_t(i)] =
        ad::add(offset[i], ad::matmul(ad::slice_rows(rest, i, i + 1),
                                      ad::transpose(rot_world[i])));
  Tensor joints = ad::concat_rows(joint_rows);

  // Blend skinning in residual form: the rest pose contributes exactly zero,
  // so mano_forward(0, 0, 0) returns the template bitwise.
  Tensor verts = shaped;
  for (int i = 0; i < j; ++i) {
    Tensor w_col = Tensor::zeros({n});
    for (int v = 0; v < n; ++v) w_col.data[size_t(v)] = m.skin_weights.at(v, i);
    Tensor moved = ad::matmul(shaped, ad::sub(ad::transpose(rot_world[i]), eye));
    Tensor term = ad::mul_colvec(ad::add_rowvec(moved, ad::reshape(offset[i], {3})), w_col);
    verts = ad::add(verts, term);
  }

  Tensor t3 = translation.rank() == 1 ? translation : ad::reshape(translation, {3});
  return {ad::add_rowvec(verts, t3), ad::add_rowvec(joints, t3)};
}

Tensor regress_joints(const HandModel& m, const Tensor& vertices) {
  if (vertices.rank() != 2 || vertices.shape[0] != m.vertex_count() || vertices.cols() != 3)
    throw ContractError("regress_joints expects " + std::to_string(m.vertex_count()) +
                            " x 3 vertices, got " + ad::shape_str(vertices.shape));
  return ad::matmul(m.joint_regressor, vertices);
}

namespace {

// Surface point of the synthetic hand patch at grid parameters in [0,1]^2:
// a curved ellipsoid wedge with a mild non-quadric ripple.
std::array<double, 3> patch_point(double fr, double fc) {
  const double lat = -1.0 + 2.0 * fr;
  const double lon = -1.3 + 2.6 * fc;
  const double rx = 0.05, ry = 0.04, rz = 0.025;
  return {rx * std::cos(lat) * std::cos(lon), ry * std::cos(lat) * std::sin(lon),
          rz * std::sin(lat) + 0.004 * std::sin(3.0 * lon) * std::cos(2.0 * lat)};
}

}  // namespace

HandModel synthesize_model(std::uint64_t seed, int vertices, int joints) {
  if (vertices < 12) throw ValidationError("synthetic hand model needs at least 12 vertices");
  if (joints < 4 || (joints - 1) % 3 != 0)
    throw ValidationError("synthetic hand model joint count must be 1 + 3k with k >= 1");
  const int n = vertices;
  const int j = joints;

  // Grid strip over the patch; the last row may be partial.
  const int grid_rows_full = std::max(2, int(std::floor(std::sqrt(n / 2.0))));
  const int cols = (n + grid_rows_full - 1) / grid_rows_full;
  const int rows = (n + cols - 1) / cols;

  HandModel m;
  m.template_verts = Tensor::zeros({n, 3});
  for (int v = 0; v < n; ++v) {
    const int r = v / cols, c = v % cols;
    const auto p = patch_point(double(r) / double(rows - 1), double(c) / double(cols - 1));
    for (int k = 0; k < 3; ++k) m.template_verts.at(v, k) = p[size_t(k)];
  }

  for (int r = 0; r + 1 < rows; ++r) {
    for (int c = 0; c + 1 < cols; ++c) {
      const int i00 = r * cols + c, i01 = i00 + 1;
      const int i10 = i00 + cols, i11 = i10 + 1;
      if (i10 < n) m.faces.push_back({i00, i01, i10});
      if (i11 < n) m.faces.push_back({i10, i01, i11});
    }
  }

  // Joint anchors: a root near the wrist edge plus (j-1)/3 chains of three
  // marching across the patch like digits.
  m.parents.assign(size_t(j), 0);
  m.parents[0] = -1;
  for (int i = 1; i < j; ++i) m.parents[size_t(i)] = ((i - 1) % 3 == 0) ? 0 : i - 1;
  const int chains = (j - 1) / 3;
  std::vector<std::array<double, 3>> anchor(static_cast<size_t>(j));
  anchor[0] = patch_point(0.5, 0.08);
  for (int k = 0; k < chains; ++k) {
    const double fr = (k + 0.5) / double(chains);
    const double steps[3] = {0.45, 0.70, 0.95};
    for (int s = 0; s < 3; ++s) anchor[size_t(1 + 3 * k + s)] = patch_point(fr, steps[s]);
  }

  auto dist2 = [&](int v, int q) {
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double e = m.template_verts.at(v, k) - anchor[size_t(q)][size_t(k)];
      d += e * e;
    }
    return d;
  };

  // Distance softmax keeps weights positive with rows normalized to 1.
  m.skin_weights = Tensor::zeros({n, j});
  const double tau_skin = 0.025 * 0.025;
  for (int v = 0; v < n; ++v) {
    double best = 1e300;
    for (int q = 0; q < j; ++q) best = std::min(best, dist2(v, q));
    double total = 0.0;
    for (int q = 0; q < j; ++q) {
      const double w = std::exp(-(dist2(v, q) - best) / tau_skin);
      m.skin_weights.at(v, q) = w;
      total += w;
    }
    for (int q = 0; q < j; ++q) m.skin_weights.at(v, q) /= total;
  }

  m.joint_regressor = Tensor::zeros({j, n});
  const double tau_reg = 0.012 * 0.012;
  for (int q = 0; q < j; ++q) {
    double best = 1e300;
    for (int v = 0; v < n; ++v) best = std::min(best, dist2(v, q));
    double total = 0.0;
    for (int v = 0; v < n; ++v) {
      const double w = std::exp(-(dist2(v, q) - best) / tau_reg);
      m.joint_regressor.at(q, v) = w;
      total += w;
    }
    for (int v = 0; v < n; ++v) m.joint_regressor.at(q, v) /= total;
  }

  // Smooth sinusoidal displacement fields, a few millimetres per unit beta.
  m.shape_basis = Tensor::zeros({3 * n, kShapeDim});
  Rng rng = named_rng(seed, "hand_model.shape_basis");
  for (int k = 0; k < kShapeDim; ++k) {
    double dir[3] = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    for (double& d : dir) d /= norm;
    const double freq = rng.uniform(20.0, 60.0);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    double amp[3];
    for (double& a : amp) a = rng.uniform(-0.004, 0.004);
    for (int v = 0; v < n; ++v) {
      double t = 0.0;
      for (int c = 0; c < 3; ++c) t += m.template_verts.at(v, c) * dir[size_t(c)];
      const double s = std::sin(freq * t + phase);
      for (int c = 0; c < 3; ++c) m.shape_basis.at(3 * v + c, k) = amp[size_t(c)] * s;
    }
  }

  validate_model(m);
  return m;
}

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < t.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor tensor_from_json(const nlohmann::json& rows, const char* field) {
  if (!rows.is_array() || rows.empty() || !rows[0].is_array())
    throw ValidationError(std::string("hand model file: ") + field +
                          " must be a 2-D numeric array");
  const int r = int(rows.size());
  const int c = int(rows[0].size());
  Tensor t = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    if (!rows[size_t(i)].is_array() || int(rows[size_t(i)].size()) != c)
      throw ValidationError(std::string("hand model file: ") + field +
                            " row " + std::to_string(i) + " has inconsistent length");
    for (int k = 0; k < c; ++k) t.at(i, k) = rows[size_t(i)][size_t(k)].get<double>();
  }
  return t;
}

}  // namespace

void save_model(const HandModel& m, const std::string& path) {
  nlohmann::json doc;
  doc["template"] = tensor_to_json(m.template_verts);
  nlohmann::json faces = nlohmann::json::array();
  for (const auto& f : m.faces) faces.push_back({f[0], f[1], f[2]});
  doc["faces"] = std::move(faces);
  doc["skin_weights"] = tensor_to_json(m.skin_weights);
  doc["shape_basis"] = tensor_to_json(m.shape_basis);
  doc["joint_regressor"] = tensor_to_json(m.joint_regressor);
  doc["parents"] = m.parents;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write hand model file: " + path);
  out << doc.dump(1, '\t') << "\n";
}

HandModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read hand model file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("hand model file " + path + " is not valid JSON: " + e.what());
  }
  for (const char* key : {"template", "faces", "skin_weights", "shape_basis",
                          "joint_regressor", "parents"})
    if (!doc.contains(key))
      throw ValidationError("hand model file " + path + " is missing field: " + key);

  HandModel m;
  m.template_verts = tensor_from_json(doc["template"], "template");
  for (const auto& f : doc["faces"]) {
    if (!f.is_array() || f.size() != 3)
      throw ValidationError("hand model file: faces entries must be triples");
    m.faces.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
  }
  m.skin_weights = tensor_from_json(doc["skin_weights"], "skin_weights");
  m.shape_basis = tensor_from_json(doc["shape_basis"], "shape_basis");
  m.joint_regressor = tensor_from_json(doc["joint_regressor"], "joint_regressor");
  m.parents = doc["parents"].get<std::vector<int>>();
  validate_model(m);
  return m;
}

HandModel load_or_synthesize_model(const std::string& path, std::uint64_t seed, int vertices,
                                   int joints) {
  if (!path.empty()) return load_model(path);
  return synthesize_model(seed, vertices, joints);
}

std::vector<std::pair<int, int>> unique_edges(const std::vector<std::array<int, 3>>& faces) {
  std::set<std::pair<int, int>> edges;
  for (const auto& f : faces)
    for (int e = 0; e < 3; ++e) {
      int a = f[size_t(e)], b = f[size_t((e + 1) % 3)];
      if (a > b) std::swap(a, b);
      edges.emplace(a, b);
    }
  return {edges.begin(), edges.end()};
}

bool is_edge_manifold(const std::vector<std::array<int, 3>>& faces, std::string* why) {
  std::map<std::pair<int, int>, int> count;
  for (const auto& f : faces)
    for (int e = 0; e < 3; ++e) {
      int a = f[size_t(e)], b = f[size_t((e + 1) % 3)];
      if (a > b) std::swap(a, b);
      ++count[{a, b}];
    }
  for (const auto& [edge, c] : count)
    if (c > 2) {
      if (why)
        *why = "edge (" + std::to_string(edge.first) + ", " + std::to_string(edge.second) +
               ") belongs to " + std::to_string(c) + " faces";
      return false;
    }
  return true;
}

FaceNormals face_normals(const Tensor& vertices, const std::vector<std::array<int, 3>>& faces,
                         double area_eps) {
  FaceNormals out;
  out.unit_normals.resize(faces.size());
  out.degenerate.assign(faces.size(), 0);
  for (size_t f = 0; f < faces.size(); ++f) {
    const auto& tri = faces[f];
    double e1[3], e2[3];
    for (int k = 0; k < 3; ++k) {
      e1[k] = vertices.at(tri[1], k) - vertices.at(tri[0], k);
      e2[k] = vertices.at(tri[2], k) - vertices.at(tri[0], k);
    }
    const double nx = e1[1] * e2[2] - e1[2] * e2[1];
    const double ny = e1[2] * e2[0] - e1[0] * e2[2];
    const double nz = e1[0] * e2[1] - e1[1] * e2[0];
    const double norm = std::sqrt(nx * nx + ny * ny + nz * nz);
    if (norm < area_eps) {
      out.unit_normals[f] = {0.0, 0.0, 0.0};
      out.degenerate[f] = 1;
      ++out.degenerate_count;
    } else {
      out.unit_normals[f] = {nx / norm, ny / norm, nz / norm};
    }
  }
  return out;
}

}  // namespace handrec::hand
