#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "handrec/hierarchy.hpp"
#include "handrec/image_encoder.hpp"
#include "handrec/ops.hpp"
#include "handrec/params.hpp"
#include "handrec/tensor.hpp"

namespace handrec::mmib {

// Token bundle at one mesh level. Core order is fixed:
// [vertex_left | vertex_right | mano_left | mano_right | grid];
// the core (everything but grid) always has 2 * N + 4 rows.
struct TokenSet {
  ad::Tensor vertex_left;   // N x D
  ad::Tensor vertex_right;  // N x D
  ad::Tensor mano_left;     // 2 x D
  ad::Tensor mano_right;    // 2 x D
  ad::Tensor grid;          // n_grid x D; size 0 when the stage carries none
  int level = 0;

  int vertex_count() const { return vertex_left.shape[0]; }
  int dim() const { return vertex_left.cols(); }
  int grid_count() const { return grid.size() == 0 ? 0 : grid.shape[0]; }
};

// Same-hand attention rules over [vertex_L | vertex_R | mano_L | mano_R | grid]:
// vertex -> own-hand vertices + grid; mano -> own-hand vertices, own-hand mano,
// grid; grid -> all vertices + grid. No vertex or grid query may see a mano
// key, and no vertex/mano query crosses hands.
ad::AttentionMask build_intra_mask(int n_vertex, int n_grid);

// Cross-hand attention rules over the core (no grid): vertex -> all vertices
// of both hands; mano -> everything. Vertex queries still never see mano keys.
ad::AttentionMask build_inter_mask(int n_vertex);

// Shared-weight order-3 Chebyshev graph convolution with a gated residual:
// out = X + GELU(T0 W0 + T1 W1 + T2 W2 + b) Wout per hand, where T0 = X,
// T1 = L X, T2 = 2 L T1 - T0. Outputs concatenated [left; right], 2N x D.
// Parameter names: {prefix}w0/w1/w2/b/out.w.
ad::Tensor graph_residual_block(nn::ParamBinder& params, const std::string& prefix,
                                const ad::Tensor& vertex_left, const ad::Tensor& vertex_right,
                                const ad::Tensor& laplacian);

// Pre-norm transformer encoder: per layer, masked 4-head self-attention with a
// residual, then a GELU MLP (hidden 4D) with a residual. Zero-initialized
// output projections make it the identity at init.
// Parameter names: {prefix}l{k}.{wq,wk,wv,wo,ln1.g,ln1.b,ln2.g,ln2.b,
// ffn.w1,ffn.b1,ffn.w2,ffn.b2}.
ad::Tensor transformer_encoder(nn::ParamBinder& params, const std::string& prefix, int depth,
                               const ad::Tensor& tokens, const ad::AttentionMask& mask);

// One interaction block: graph convolution on the vertex tokens, same-hand
// encoder over core + grid, cross-hand encoder over the core only (grid
// passes through unchanged).
TokenSet mmib_forward(nn::ParamBinder& params, const std::string& prefix, int depth,
                      const TokenSet& tokens, const ad::Tensor& laplacian);

// Registers one block's parameters: graph convolution ({prefix}gcn.*) and the
// two encoders ({prefix}intra.*, {prefix}inter.*) of width dim.
void register_mmib_params(nn::ParamStore& store, const std::string& prefix, int dim, int depth,
                          std::uint64_t seed);

struct StackConfig {
  std::array<int, 3> level_dims{64, 32, 16};  // token width per level
  int d_gap = 128;
  int grid_size = 4;  // g; each level carries g^2 grid tokens
  int depth = 1;      // encoder layers per attention stage
  int pose_dim = 48;
};

struct StackOutput {
  ad::Tensor vertices_left;   // N x 3
  ad::Tensor vertices_right;  // N x 3
  ad::Tensor theta_left;      // [pose_dim]
  ad::Tensor theta_right;     // [pose_dim]
  ad::Tensor beta_left;       // [10]
  ad::Tensor beta_right;      // [10]
  TokenSet tokens;            // final tokens at the full vertex count
};

// Registers the three-level stack: token initializer from the global feature
// (width depends on the coarsest vertex count n1), one block per level,
// per-level transition maps, and the zero-initialized vertex/pose/shape heads.
void register_stack_params(nn::ParamStore& store, const StackConfig& config, int n1,
                           std::uint64_t seed);

// Coarse-to-fine pipeline: global feature initializes 2 N1 + 4 core tokens;
// each level samples fresh grid tokens from its pyramid map, runs one block,
// upsamples vertex tokens to the next level and applies a learned width map
// to every core token; heads read the final tokens.
StackOutput stack_forward(nn::ParamBinder& params, const StackConfig& config,
                          const img::FeaturePyramid& pyramid,
                          const hier::MeshHierarchy& hierarchy);

}  // namespace handrec::mmib
