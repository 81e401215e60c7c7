#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "handrec/losses.hpp"

namespace handrec::cfg {

// One flat bag of knobs for every command. JSON files (schema in
// docs/run_config.schema.json) may set any subset; unset keys keep the
// preset's defaults, and command-line flags override file values.
struct RunConfig {
  std::string preset = "desk";  // "desk" or "full"

  // model / mesh hierarchy
  int model_vertices = 98;
  int model_joints = 16;
  std::uint64_t model_seed = 7;
  std::vector<int> hierarchy_levels{4, 8, 16, 98};

  // widths and depths
  std::array<int, 3> level_dims{128, 128, 128};  // token width per attention stage
  int d_gap = 128;                            // global image feature width
  int d_r = 32;                               // mesh-aligned feature width
  int grid_size = 4;                          // grid tokens per side
  int encoder_depth = 1;                      // layers per transformer encoder
  int refine_iterations = 1;
  int image_size = 64;
  std::array<int, 3> enc_channels{16, 32, 64};
  std::array<int, 3> map_channels{64, 32, 16};

  // optimizer
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // run control
  std::uint64_t seed = 1;
  int steps = 500;
  int samples = 4;                // on-the-fly training-set size
  std::uint64_t sample_seed = 1;  // inference input

  // paths
  std::string model_path;       // empty -> synthesize from model_seed
  std::string checkpoint_path;  // train output / infer+eval input
  std::string manifest_path;    // dataset manifest (JSON lines)
  std::string out_dir = ".";

  loss::LossWeights weights;
};

// Named baseline: "desk" (fast, finite-difference friendly) or "full"
// (778-vertex topology, forward-scale checks).
RunConfig preset_config(const std::string& name);

// JSON text -> config. Starts from the file's "preset" (default desk), then
// applies the remaining keys. Unknown keys raise ValidationError.
RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::string& path);

std::string config_to_json_text(const RunConfig& config);

// Structural checks (level count, divisibility, positivity). Raises
// ValidationError.
void validate_config(const RunConfig& config);

}  // namespace handrec::cfg
