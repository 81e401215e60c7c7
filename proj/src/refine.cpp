#include "handrec/refine.hpp"

#include <string>

#include "handrec/errors.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/ops.hpp"

namespace handrec::refine {

using ad::Tensor;
using nn::Init;

namespace {

int total_channels(const RefineConfig& config) {
  return config.map_channels[0] + config.map_channels[1] + config.map_channels[2];
}

std::string iteration_prefix(int k) { return "refine.it" + std::to_string(k) + "."; }

}  // namespace

MeshAligned mesh_aligned_features(nn::ParamBinder& params, const std::string& prefix,
                                  const ad::Tensor& vertices, const cam::Camera& camera,
                                  const img::FeaturePyramid& pyramid,
                                  const RefineConfig& config) {
  if (vertices.rank() != 2 || vertices.shape[1] != 3)
    throw ContractError("mesh_aligned_features expects vertices of shape [n, 3]");
  if (!(camera.s > 0.0))
    throw ValidationError("mesh_aligned_features requires a positive camera scale");
  if (pyramid.maps.size() != 3)
    throw ValidationError("mesh_aligned_features requires a three-map feature pyramid");
  for (size_t i = 0; i < 3; ++i) {
    if (pyramid.maps[i].rank() != 3 ||
        pyramid.maps[i].shape[0] != config.map_channels[i])
      throw ValidationError("feature map " + std::to_string(i + 1) +
                            " does not match the configured channel counts");
  }

  Tensor pixels = cam::project(vertices, camera);
  Tensor coords = cam::pixels_to_normalized(pixels, config.image_size);

  Tensor sampled = ad::concat_cols(
      ad::concat_cols(ad::bilinear_sample(pyramid.maps[0], coords),
                      ad::bilinear_sample(pyramid.maps[1], coords)),
      ad::bilinear_sample(pyramid.maps[2], coords));

  Tensor hidden = ad::gelu(
      ad::add_rowvec(ad::matmul(sampled, params.get(prefix + "mlp.w1")),
                     params.get(prefix + "mlp.b1")));
  MeshAligned out;
  out.phi_v = ad::add_rowvec(ad::matmul(hidden, params.get(prefix + "mlp.w2")),
                             params.get(prefix + "mlp.b2"));

  const int n = vertices.shape[0];
  Tensor average = Tensor::full({1, n}, 1.0 / double(n));
  out.phi_m = ad::matmul(average, out.phi_v);
  return out;
}

void register_refine_params(nn::ParamStore& store, const RefineConfig& config,
                            std::uint64_t seed) {
  if (config.iterations < 1)
    throw ValidationError("refinement needs at least one iteration");
  const int c_total = total_channels(config);
  const int d_wide = config.token_dim + config.d_r;
  for (int k = 0; k < config.iterations; ++k) {
    const std::string prefix = iteration_prefix(k);
    store.create(prefix + "mlp.w1", {c_total, 2 * config.d_r}, Init::kFanIn, seed);
    store.create(prefix + "mlp.b1", {2 * config.d_r}, Init::kZero, seed);
    store.create(prefix + "mlp.w2", {2 * config.d_r, config.d_r}, Init::kFanIn, seed);
    store.create(prefix + "mlp.b2", {config.d_r}, Init::kZero, seed);
    mmib::register_mmib_params(store, prefix + "mmib.", d_wide, config.depth, seed);
    store.create(prefix + "head.vertex.w", {d_wide, 3}, Init::kZero, seed);
    store.create(prefix + "head.vertex.b", {3}, Init::kZero, seed);
    store.create(prefix + "head.pose.w", {d_wide, config.pose_dim}, Init::kZero, seed);
    store.create(prefix + "head.pose.b", {config.pose_dim}, Init::kZero, seed);
    store.create(prefix + "head.shape.w", {d_wide, hand::kShapeDim}, Init::kZero, seed);
    store.create(prefix + "head.shape.b", {hand::kShapeDim}, Init::kZero, seed);
  }
}

Prediction refine_forward(nn::ParamBinder& params, const RefineConfig& config,
                          const mmib::StackOutput& stack, const cam::Camera& camera,
                          const img::FeaturePyramid& pyramid,
                          const ad::Tensor& full_mesh_laplacian) {
  if (stack.tokens.dim() != config.token_dim)
    throw ContractError("refinement tokens must match the configured token width");
  if (stack.vertices_left.rank() != 2 ||
      stack.vertices_left.shape[0] != stack.tokens.vertex_count())
    throw ContractError("vertex estimates and vertex tokens must agree in count");

  Prediction pred;
  pred.vertices_left = stack.vertices_left;
  pred.vertices_right = stack.vertices_right;
  pred.theta_left = stack.theta_left;
  pred.theta_right = stack.theta_right;
  pred.beta_left = stack.beta_left;
  pred.beta_right = stack.beta_right;
  pred.camera = camera;

  for (int k = 0; k < config.iterations; ++k) {
    const std::string prefix = iteration_prefix(k);
    MeshAligned left =
        mesh_aligned_features(params, prefix, pred.vertices_left, camera, pyramid, config);
    MeshAligned right =
        mesh_aligned_features(params, prefix, pred.vertices_right, camera, pyramid, config);

    mmib::TokenSet tokens;
    tokens.vertex_left = ad::concat_cols(stack.tokens.vertex_left, left.phi_v);
    tokens.vertex_right = ad::concat_cols(stack.tokens.vertex_right, right.phi_v);
    tokens.mano_left = ad::concat_cols(stack.tokens.mano_left,
                                       ad::concat_rows({left.phi_m, left.phi_m}));
    tokens.mano_right = ad::concat_cols(stack.tokens.mano_right,
                                        ad::concat_rows({right.phi_m, right.phi_m}));
    tokens.grid = Tensor();
    tokens.level = stack.tokens.level;

    mmib::TokenSet refined = mmib::mmib_forward(params, prefix + "mmib.", config.depth,
                                                tokens, full_mesh_laplacian);

    const Tensor& vw = params.get(prefix + "head.vertex.w");
    const Tensor& vb = params.get(prefix + "head.vertex.b");
    pred.vertices_left =
        ad::add(pred.vertices_left, ad::add_rowvec(ad::matmul(refined.vertex_left, vw), vb));
    pred.vertices_right =
        ad::add(pred.vertices_right, ad::add_rowvec(ad::matmul(refined.vertex_right, vw), vb));

    auto offset = [&params, &prefix](const Tensor& mano, int row, const char* which,
                                     int width) {
      Tensor token = ad::slice_rows(mano, row, row + 1);
      Tensor mapped = ad::add_rowvec(
          ad::matmul(token, params.get(prefix + "head." + which + ".w")),
          params.get(prefix + "head." + which + ".b"));
      return ad::reshape(mapped, {width});
    };
    pred.theta_left =
        ad::add(pred.theta_left, offset(refined.mano_left, 0, "pose", config.pose_dim));
    pred.theta_right =
        ad::add(pred.theta_right, offset(refined.mano_right, 0, "pose", config.pose_dim));
    pred.beta_left =
        ad::add(pred.beta_left, offset(refined.mano_left, 1, "shape", hand::kShapeDim));
    pred.beta_right =
        ad::add(pred.beta_right, offset(refined.mano_right, 1, "shape", hand::kShapeDim));
  }
  return pred;
}

}  // namespace handrec::refine
