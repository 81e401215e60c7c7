#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "handrec/camera.hpp"
#include "handrec/image_encoder.hpp"
#include "handrec/mmib.hpp"
#include "handrec/params.hpp"
#include "handrec/tensor.hpp"

namespace handrec::refine {

struct RefineConfig {
  int token_dim = 16;                        // width of the incoming final tokens
  int d_r = 16;                              // mesh-aligned feature width
  std::array<int, 3> map_channels{64, 32, 16};  // pyramid channels, coarse -> fine
  int image_size = 64;
  int iterations = 1;  // stacked refinement blocks, separate weights each
  int depth = 1;       // encoder depth inside each refinement block
  int pose_dim = 48;
};

// Final two-hand estimate in meters plus the camera it was aligned under.
struct Prediction {
  ad::Tensor vertices_left;   // N x 3
  ad::Tensor vertices_right;  // N x 3
  ad::Tensor theta_left;      // [pose_dim]
  ad::Tensor theta_right;     // [pose_dim]
  ad::Tensor beta_left;       // [10]
  ad::Tensor beta_right;      // [10]
  cam::Camera camera;
};

struct MeshAligned {
  ad::Tensor phi_v;  // N x d_r, one feature row per vertex
  ad::Tensor phi_m;  // 1 x d_r, vertex average
};

// Projects the vertices, samples all three pyramid maps at the projected
// (border-clamped) locations, concatenates per vertex and reduces with a
// two-layer GELU perceptron ({prefix}mlp.*). phi_m averages phi_v over
// vertices. Differentiable in the vertices through the sampling coordinates.
MeshAligned mesh_aligned_features(nn::ParamBinder& params, const std::string& prefix,
                                  const ad::Tensor& vertices, const cam::Camera& camera,
                                  const img::FeaturePyramid& pyramid, const RefineConfig& config);

// Registers iteration-k blocks under refine.it{k}.: the feature perceptron,
// one interaction block of width token_dim + d_r, and zero-initialized offset
// heads (so an untrained refinement is exactly the identity).
void register_refine_params(nn::ParamStore& store, const RefineConfig& config,
                            std::uint64_t seed);

// Mesh-alignment feedback: each iteration samples image features at the
// current vertex estimate, widens every token with them (vertex tokens get
// their own row of phi_v, mano tokens get phi_m), runs one interaction block
// without grid tokens, and adds the heads' residual offsets to V, theta,
// beta. Token state restarts from the stack outputs every iteration; only the
// geometry accumulates.
Prediction refine_forward(nn::ParamBinder& params, const RefineConfig& config,
                          const mmib::StackOutput& stack, const cam::Camera& camera,
                          const img::FeaturePyramid& pyramid,
                          const ad::Tensor& full_mesh_laplacian);

}  // namespace handrec::refine
