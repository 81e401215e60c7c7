#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "handrec/camera.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/params.hpp"
#include "handrec/tensor.hpp"

namespace handrec::img {

struct EncoderConfig {
  int image_size = 64;                       // square, power of two, >= 32
  int d_gap = 128;                           // global feature width
  std::array<int, 3> enc_channels{16, 32, 64};  // strided encoder stages
  std::array<int, 3> map_channels{64, 32, 16};  // pyramid maps, coarse -> fine
};

// Global feature plus three feature maps with strictly increasing spatial
// size (coarse -> fine). f_gap is a [1, d_gap] row vector.
struct FeaturePyramid {
  ad::Tensor f_gap;
  std::vector<ad::Tensor> maps;
};

// Registers the convolutional trunk's parameters (names under "enc." and
// "dec.") plus one grid projection per pyramid level ("grid.l{i}.{w,b}")
// mapping map channels to level_dims[i].
void register_encoder_params(nn::ParamStore& store, const EncoderConfig& config,
                             const std::array<int, 3>& level_dims, std::uint64_t seed);

// Strided-conv encoder to a bottleneck at size/8, global average pool and a
// linear layer for f_gap; 1x1 conv plus two stride-2 transposed convs emit the
// maps at size/8, size/4, size/2. All features are normalized to unit scale
// stage by stage (f_gap across channels, conv activations and maps per pixel
// across channels) so consumers see O(1) inputs regardless of image sparsity.
FeaturePyramid encode(nn::ParamBinder& params, const EncoderConfig& config,
                      const ad::Tensor& image);

// Uniform g x g lattice over [-1, 1] x [-1, 1] (inclusive endpoints; the
// single g=1 point sits at 0). Rows in row-major (y outer) order, [g*g, 2].
ad::Tensor grid_lattice(int g);

// Bilinearly samples `map` at the g x g lattice, then applies the learned
// projection `prefix + ".w"` / `prefix + ".b"` to level_dim channels.
ad::Tensor grid_tokens(nn::ParamBinder& params, const std::string& prefix,
                       const ad::Tensor& map, int level_dim, int g);

// ---- synthetic supervision ----

struct HandGroundTruth {
  ad::Tensor theta;        // [pose_dim]
  ad::Tensor beta;         // [10]
  ad::Tensor translation;  // [3]
  ad::Tensor vertices;     // [N, 3]
  ad::Tensor joints;       // [J, 3]
};

struct SyntheticSample {
  std::uint64_t seed = 0;
  ad::Tensor image;  // [3, S, S]: channel 0 left hand, 1 right hand, 2 both
  cam::Camera camera;
  HandGroundTruth left;
  HandGroundTruth right;
};

// Seeded draw of two posed hands with overlapping projections, a camera that
// frames them, and an image of Gaussian splats (sigma 1.5 px) at the
// projected joints.
SyntheticSample synthesize_sample(const hand::HandModel& model_left, const hand::HandModel& model_right,
                                  std::uint64_t seed, int image_size);

// Sum of unit-height Gaussians (sigma 1.5 px) centered at each pixel-space
// row of `pixels`, rasterized onto a constant [size, size] plane.
ad::Tensor render_joint_splats(const ad::Tensor& pixels, int image_size);

// JSON-lines manifest: one sample per line (seed, camera, gt params). Images
// and geometry are regenerated from the seed on load; lines without a seed
// are skipped (counted in *skipped when given).
void save_manifest(const std::string& path, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_manifest(const std::string& path,
                                           const hand::HandModel& model_left,
                                           const hand::HandModel& model_right, int image_size,
                                           int* skipped = nullptr);

}  // namespace handrec::img
