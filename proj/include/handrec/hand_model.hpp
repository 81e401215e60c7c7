#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "handrec/tensor.hpp"

namespace handrec::hand {

constexpr int kShapeDim = 10;

// Rigged template hand. Right-handed coordinates, meters. Pose dimension is
// 3 * joint_count() axis-angle values, root first; parents are topologically
// ordered (parents[j] < j, parents[0] == -1).
struct HandModel {
  ad::Tensor template_verts;                // N x 3
  std::vector<std::array<int, 3>> faces;    // triangles into template rows
  ad::Tensor skin_weights;                  // N x J, rows sum to 1
  ad::Tensor shape_basis;                   // (N*3) x kShapeDim, (vertex, coord) row-major
  ad::Tensor joint_regressor;               // J x N, rows sum to 1
  std::vector<int> parents;

  int vertex_count() const { return template_verts.shape[0]; }
  int joint_count() const { return int(parents.size()); }
  int pose_dim() const { return 3 * joint_count(); }
};

// Throws ValidationError naming the offending field.
void validate_model(const HandModel& m);

// Left hand: template and shape basis mirrored over x, faces rewound so the
// surface orientation stays consistent.
HandModel mirrored(const HandModel& m);

// Axis-angle [3] to rotation matrix [3,3]. Differentiable; below |w| = 1e-8
// the sin/cos coefficients switch to their Taylor forms (exact at w = 0).
ad::Tensor rodrigues(const ad::Tensor& axis_angle);

struct ManoOutput {
  ad::Tensor vertices;  // N x 3
  ad::Tensor joints;    // J x 3, forward-kinematics joint positions
};

// Shape blend, joint regression, forward kinematics, linear blend skinning,
// then a global translation. theta is [3J] axis-angle per joint (any
// magnitude is accepted; rotations are periodic), beta is [kShapeDim],
// translation is [3].
ManoOutput mano_forward(const HandModel& m, const ad::Tensor& theta, const ad::Tensor& beta,
                        const ad::Tensor& translation);

// joint_regressor applied to an arbitrary (e.g. predicted) mesh.
ad::Tensor regress_joints(const HandModel& m, const ad::Tensor& vertices);

// Procedural right-hand stand-in: a curved ellipsoid patch with J joints
// anchored on it, distance-softmax skinning and regression weights, and a
// smooth random shape basis. Deterministic in (seed, vertices, joints).
HandModel synthesize_model(std::uint64_t seed, int vertices, int joints);

HandModel load_model(const std::string& path);
void save_model(const HandModel& m, const std::string& path);

// Loads when path is non-empty, otherwise synthesizes.
HandModel load_or_synthesize_model(const std::string& path, std::uint64_t seed,
                                   int vertices = 98, int joints = 16);

// ---- mesh utilities ----

// Sorted unique undirected edges (a < b).
std::vector<std::pair<int, int>> unique_edges(const std::vector<std::array<int, 3>>& faces);

// Every undirected edge belongs to at most two faces.
bool is_edge_manifold(const std::vector<std::array<int, 3>>& faces, std::string* why = nullptr);

struct FaceNormals {
  std::vector<std::array<double, 3>> unit_normals;  // zero vector where degenerate
  std::vector<std::uint8_t> degenerate;             // area below threshold
  int degenerate_count = 0;
};

// Unit normals of a constant mesh; faces with area near zero are flagged.
FaceNormals face_normals(const ad::Tensor& vertices, const std::vector<std::array<int, 3>>& faces,
                         double area_eps = 1e-12);

}  // namespace handrec::hand
