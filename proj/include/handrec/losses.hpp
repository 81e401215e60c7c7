#pragma once

#include <utility>

#include "handrec/camera.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/tensor.hpp"

namespace handrec::loss {

// Multipliers for the weighted training total.
struct LossWeights {
  double lambda_v = 40.0;
  double lambda_j = 40.0;
  double lambda_n = 5.0;
  double lambda_e = 40.0;
  double lambda_p = 10.0;
  double lambda_v_mano = 10.0;
  double lambda_consist = 40.0;
};

// Everything the per-hand loss terms consume. Predicted tensors live on the
// caller's tape; ground-truth tensors are constants in the same camera frame
// as the prediction. The model supplies topology, the joint regressor and the
// parametric layer.
struct HandLossInputs {
  ad::Tensor pred_vertices;  // N x 3, meters
  ad::Tensor pred_theta;     // [pose_dim]
  ad::Tensor pred_beta;      // [10]
  ad::Tensor gt_vertices;    // N x 3, meters
  ad::Tensor gt_theta;       // [pose_dim]
  ad::Tensor gt_beta;        // [10]
  const hand::HandModel* model = nullptr;
};

// Scalar loss terms on the caller's tape, plus the count of ground-truth
// faces skipped as degenerate by the normal term.
struct LossTerms {
  ad::Tensor l_v, l_j, l_n, l_e, l_p, l_v_mano, l_consist;
  int degenerate_faces = 0;
};

// Sum over hands of (mean per-vertex L1 in 3D) + (mean per-vertex L1 of the
// projected pixels); the joint variant applies the model's regressor to both
// the predicted and the ground-truth mesh first. Returns {L_V, L_J}.
std::pair<ad::Tensor, ad::Tensor> vertex_joint_loss(const HandLossInputs& left,
                                                    const HandLossInputs& right,
                                                    const cam::Camera& camera);

// Mean of |unit predicted edge . unit ground-truth face normal| over every
// (hand, face, edge) triple. Ground-truth faces with near-zero area are
// skipped and counted in *degenerate. Edge normalization is guarded with
// sqrt(|e|^2 + 1e-12) so a collapsed prediction still has finite gradients.
ad::Tensor normal_loss(const HandLossInputs& left, const HandLossInputs& right,
                       int* degenerate = nullptr);

// Sum over hands of the per-hand mean over unique undirected edges of
// | |e| - |e_gt| |, with the same guarded square root.
ad::Tensor edge_loss(const HandLossInputs& left, const HandLossInputs& right);

// {L_P, L_V_mano}: L_P sums per-hand mean |theta - theta_gt| and mean
// |beta - beta_gt|; L_V_mano runs the parametric layer (zero translation) on
// the predicted parameters and takes the mean per-vertex L1 against the
// ground-truth mesh.
std::pair<ad::Tensor, ad::Tensor> mano_losses(const HandLossInputs& left,
                                              const HandLossInputs& right);

// Couples the two branches: per hand, mean per-vertex L1 between the
// parametric mesh and the predicted mesh plus mean per-joint L1 between their
// regressed joints, summed over hands. Gradients reach both branches.
ad::Tensor consistency_loss(const HandLossInputs& left, const HandLossInputs& right);

// All seven terms. Uses one parametric-layer evaluation per hand shared by
// the parameter and consistency terms.
LossTerms compute_losses(const HandLossInputs& left, const HandLossInputs& right,
                         const cam::Camera& camera);

// Weighted sum of the seven terms on the tape. A non-finite term raises
// NumericError naming it.
ad::Tensor total_loss(const LossTerms& terms, const LossWeights& weights);

// Plain-number snapshot for logging.
struct LossReport {
  double l_v = 0, l_j = 0, l_n = 0, l_e = 0, l_p = 0, l_v_mano = 0, l_consist = 0;
  double total = 0;
  int degenerate_faces = 0;
};
LossReport report_of(const LossTerms& terms, const LossWeights& weights);

// ---- evaluation metrics ----

struct HandMeshPair {
  ad::Tensor pred;  // N x 3, meters
  ad::Tensor gt;    // N x 3, meters
  const hand::HandModel* model = nullptr;
};

struct MetricReport {
  double mpjpe_mm = 0;   // mean joint error after per-hand root alignment, root excluded
  double mpvpe_mm = 0;   // mean vertex error after per-hand root-joint alignment
  double pck_auc = 0;    // area under fraction-correct vs threshold, 0..50mm, 101 bins
  double proj2d_px = 0;  // mean pixel distance of projected vertices, unaligned
};

// Pure value-level evaluation (no tape). Joints come from each model's
// regressor; each hand is aligned by subtracting its own root joint before
// the 3D errors are taken.
MetricReport metrics(const HandMeshPair& left, const HandMeshPair& right,
                     const cam::Camera& camera);

}  // namespace handrec::loss
