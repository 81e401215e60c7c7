#include "handrec/config.hpp"

#include <fstream>
#include <sstream>

#include "handrec/errors.hpp"
#include "json.hpp"

namespace handrec::cfg {

namespace {

using nlohmann::json;

template <std::size_t N>
void read_int_array(const json& value, const std::string& key, std::array<int, N>& out) {
  if (!value.is_array() || value.size() != N) {
    throw ValidationError("config key '" + key + "' must be an array of " + std::to_string(N) +
                          " integers");
  }
  for (std::size_t i = 0; i < N; ++i) out[i] = value[i].get<int>();
}

void apply_key(RunConfig& c, const std::string& key, const json& v) {
  if (key == "preset") return;  // consumed before the key loop
  if (key == "model_vertices") { c.model_vertices = v.get<int>(); return; }
  if (key == "model_joints") { c.model_joints = v.get<int>(); return; }
  if (key == "model_seed") { c.model_seed = v.get<std::uint64_t>(); return; }
  if (key == "hierarchy_levels") { c.hierarchy_levels = v.get<std::vector<int>>(); return; }
  if (key == "level_dims") { read_int_array(v, key, c.level_dims); return; }
  if (key == "d_gap") { c.d_gap = v.get<int>(); return; }
  if (key == "d_r") { c.d_r = v.get<int>(); return; }
  if (key == "grid_size") { c.grid_size = v.get<int>(); return; }
  if (key == "encoder_depth") { c.encoder_depth = v.get<int>(); return; }
  if (key == "refine_iterations") { c.refine_iterations = v.get<int>(); return; }
  if (key == "image_size") { c.image_size = v.get<int>(); return; }
  if (key == "enc_channels") { read_int_array(v, key, c.enc_channels); return; }
  if (key == "map_channels") { read_int_array(v, key, c.map_channels); return; }
  if (key == "learning_rate") { c.learning_rate = v.get<double>(); return; }
  if (key == "beta1") { c.beta1 = v.get<double>(); return; }
  if (key == "beta2") { c.beta2 = v.get<double>(); return; }
  if (key == "adam_eps") { c.adam_eps = v.get<double>(); return; }
  if (key == "seed") { c.seed = v.get<std::uint64_t>(); return; }
  if (key == "steps") { c.steps = v.get<int>(); return; }
  if (key == "samples") { c.samples = v.get<int>(); return; }
  if (key == "sample_seed") { c.sample_seed = v.get<std::uint64_t>(); return; }
  if (key == "model_path") { c.model_path = v.get<std::string>(); return; }
  if (key == "checkpoint_path") { c.checkpoint_path = v.get<std::string>(); return; }
  if (key == "manifest_path") { c.manifest_path = v.get<std::string>(); return; }
  if (key == "out_dir") { c.out_dir = v.get<std::string>(); return; }
  if (key == "weights") {
    if (!v.is_object()) throw ValidationError("config key 'weights' must be an object");
    for (auto it = v.begin(); it != v.end(); ++it) {
      const std::string& w = it.key();
      double x = it.value().get<double>();
      if (w == "lambda_v") c.weights.lambda_v = x;
      else if (w == "lambda_j") c.weights.lambda_j = x;
      else if (w == "lambda_n") c.weights.lambda_n = x;
      else if (w == "lambda_e") c.weights.lambda_e = x;
      else if (w == "lambda_p") c.weights.lambda_p = x;
      else if (w == "lambda_v_mano") c.weights.lambda_v_mano = x;
      else if (w == "lambda_consist") c.weights.lambda_consist = x;
      else throw ValidationError("unknown loss weight key '" + w + "'");
    }
    return;
  }
  throw ValidationError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig preset_config(const std::string& name) {
  RunConfig c;  // defaults are the desk preset
  if (name == "desk") return c;
  if (name == "full") {
    c.preset = "full";
    c.model_vertices = 778;
    c.hierarchy_levels = {63, 126, 252, 778};
    // Token widths, feature widths, and the encoder stay at the desk sizes:
    // the full preset only restores the reference mesh resolution so the
    // coarse-to-fine sequence-length law can be exercised at scale.
    return c;
  }
  throw ValidationError("unknown preset '" + name + "' (expected \"desk\" or \"full\")");
}

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config root must be a JSON object");
  std::string preset = "desk";
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ValidationError("config key 'preset' must be a string");
    preset = j["preset"].get<std::string>();
  }
  RunConfig c = preset_config(preset);
  try {
    for (auto it = j.begin(); it != j.end(); ++it) apply_key(c, it.key(), it.value());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json_text(buf.str());
}

std::string config_to_json_text(const RunConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["model_vertices"] = c.model_vertices;
  j["model_joints"] = c.model_joints;
  j["model_seed"] = c.model_seed;
  j["hierarchy_levels"] = c.hierarchy_levels;
  j["level_dims"] = c.level_dims;
  j["d_gap"] = c.d_gap;
  j["d_r"] = c.d_r;
  j["grid_size"] = c.grid_size;
  j["encoder_depth"] = c.encoder_depth;
  j["refine_iterations"] = c.refine_iterations;
  j["image_size"] = c.image_size;
  j["enc_channels"] = c.enc_channels;
  j["map_channels"] = c.map_channels;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["samples"] = c.samples;
  j["sample_seed"] = c.sample_seed;
  j["model_path"] = c.model_path;
  j["checkpoint_path"] = c.checkpoint_path;
  j["manifest_path"] = c.manifest_path;
  j["out_dir"] = c.out_dir;
  j["weights"] = {
      {"lambda_v", c.weights.lambda_v},         {"lambda_j", c.weights.lambda_j},
      {"lambda_n", c.weights.lambda_n},         {"lambda_e", c.weights.lambda_e},
      {"lambda_p", c.weights.lambda_p},         {"lambda_v_mano", c.weights.lambda_v_mano},
      {"lambda_consist", c.weights.lambda_consist},
  };
  return j.dump(2) + "\n";
}

void validate_config(const RunConfig& c) {
  if (c.preset != "desk" && c.preset != "full") {
    throw ValidationError("preset must be \"desk\" or \"full\"");
  }
  if (c.model_vertices < 8) throw ValidationError("model_vertices must be at least 8");
  if (c.model_joints < 1 || (c.model_joints - 1) % 3 != 0) {
    throw ValidationError("model_joints must be 1 + 3k (root plus whole fingers)");
  }
  if (c.hierarchy_levels.size() != 4) {
    throw ValidationError("hierarchy_levels must list exactly 4 vertex counts");
  }
  for (std::size_t i = 0; i + 1 < c.hierarchy_levels.size(); ++i) {
    if (c.hierarchy_levels[i] >= c.hierarchy_levels[i + 1]) {
      throw ValidationError("hierarchy_levels must be strictly ascending");
    }
  }
  if (c.hierarchy_levels.front() < 2) {
    throw ValidationError("the coarsest hierarchy level needs at least 2 vertices");
  }
  if (c.hierarchy_levels.back() != c.model_vertices) {
    throw ValidationError("hierarchy_levels must end at model_vertices");
  }
  for (int d : c.level_dims) {
    if (d <= 0 || d % 4 != 0) {
      throw ValidationError("every level_dims entry must be a positive multiple of 4 "
                            "(4-head attention)");
    }
  }
  if (c.d_gap <= 0) throw ValidationError("d_gap must be positive");
  if (c.d_r <= 0) throw ValidationError("d_r must be positive");
  if ((c.level_dims[2] + c.d_r) % 4 != 0) {
    throw ValidationError("level_dims[2] + d_r must be a multiple of 4 "
                          "(refinement runs 4-head attention on widened tokens)");
  }
  if (c.grid_size < 1) throw ValidationError("grid_size must be at least 1");
  if (c.encoder_depth < 1) throw ValidationError("encoder_depth must be at least 1");
  if (c.refine_iterations < 1) throw ValidationError("refine_iterations must be at least 1");
  if (c.image_size < 8 || c.image_size % 8 != 0) {
    throw ValidationError("image_size must be a positive multiple of 8 "
                          "(feature maps are sampled at 1/2, 1/4, and 1/8 resolution)");
  }
  for (int ch : c.enc_channels) {
    if (ch < 1) throw ValidationError("enc_channels entries must be positive");
  }
  for (int ch : c.map_channels) {
    if (ch < 1) throw ValidationError("map_channels entries must be positive");
  }
  if (!(c.learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) throw ValidationError("beta1 must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ValidationError("beta2 must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ValidationError("adam_eps must be positive");
  if (c.steps < 0) throw ValidationError("steps must be non-negative");
  if (c.samples < 1) throw ValidationError("samples must be at least 1");
  const double lambdas[] = {c.weights.lambda_v,      c.weights.lambda_j, c.weights.lambda_n,
                            c.weights.lambda_e,      c.weights.lambda_p, c.weights.lambda_v_mano,
                            c.weights.lambda_consist};
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw ValidationError("loss weights must be non-negative");
  }
}

}  // namespace handrec::cfg
