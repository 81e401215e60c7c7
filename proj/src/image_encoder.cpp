#include "handrec/image_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "handrec/errors.hpp"
#include "handrec/ops.hpp"
#include "handrec/rng.hpp"

namespace handrec::img {

using ad::Tensor;
using json = nlohmann::json;

namespace {

bool power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

void check_image_size(int s) {
  if (s < 32 || !power_of_two(s))
    throw ValidationError("image size must be a power of two >= 32, got " +
                          std::to_string(s));
}

}  // namespace

void register_encoder_params(nn::ParamStore& store, const EncoderConfig& config,
                             const std::array<int, 3>& level_dims, std::uint64_t seed) {
  check_image_size(config.image_size);
  const auto [e1, e2, e3] = config.enc_channels;
  const auto [c1, c2, c3] = config.map_channels;
  using nn::Init;
  store.create("enc.conv1.w", {e1, 3, 3, 3}, Init::kFanIn, seed);
  store.create("enc.conv1.b", {e1}, Init::kZero, seed);
  store.create("enc.conv2.w", {e2, e1, 3, 3}, Init::kFanIn, seed);
  store.create("enc.conv2.b", {e2}, Init::kZero, seed);
  store.create("enc.conv3.w", {e3, e2, 3, 3}, Init::kFanIn, seed);
  store.create("enc.conv3.b", {e3}, Init::kZero, seed);
  store.create("enc.gap.w", {e3, config.d_gap}, Init::kFanIn, seed);
  store.create("enc.gap.b", {config.d_gap}, Init::kZero, seed);
  store.create("dec.map1.w", {c1, e3, 1, 1}, Init::kFanIn, seed);
  store.create("dec.map1.b", {c1}, Init::kZero, seed);
  store.create("dec.map2.w", {c1, c2, 4, 4}, Init::kFanIn, seed);  // transposed
  store.create("dec.map2.b", {c2}, Init::kZero, seed);
  store.create("dec.map3.w", {c2, c3, 4, 4}, Init::kFanIn, seed);  // transposed
  store.create("dec.map3.b", {c3}, Init::kZero, seed);
  for (int i = 0; i < 3; ++i) {
    std::string prefix = "grid.l" + std::to_string(i + 1);
    store.create(prefix + ".w", {config.map_channels[size_t(i)], level_dims[size_t(i)]},
                 Init::kFanIn, seed);
    store.create(prefix + ".b", {level_dims[size_t(i)]}, Init::kZero, seed);
  }
}

FeaturePyramid encode(nn::ParamBinder& params, const EncoderConfig& config,
                      const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3)
    throw ValidationError("encode: image must be [3, H, W], got " +
                          ad::shape_str(image.shape));
  if (image.shape[1] != image.shape[2])
    throw ValidationError("encode: image must be square, got " + ad::shape_str(image.shape));
  check_image_size(image.shape[1]);
  if (image.shape[1] != config.image_size)
    throw ValidationError("encode: image is " + std::to_string(image.shape[1]) +
                          "px but the config expects " + std::to_string(config.image_size));

  // Activations are re-normalized after every stage, per pixel across
  // channels: sparse synthetic images otherwise shrink the signal by orders
  // of magnitude through the conv chain, starving downstream learned maps of
  // gradient. The per-pixel axis keeps average pooling meaningful (a
  // per-channel norm would zero every channel mean) and hands samplers
  // unit-scale feature vectors; normalizing stage by stage keeps each input
  // to the normalizer well above its epsilon floor.
  auto normalized = [](const Tensor& m) {
    Tensor cols = ad::transpose(ad::reshape(m, {m.shape[0], m.shape[1] * m.shape[2]}));
    cols = ad::layer_norm(cols, Tensor::full({m.shape[0]}, 1.0),
                          Tensor::zeros({m.shape[0]}));
    return ad::reshape(ad::transpose(cols), m.shape);
  };

  // Encoder: three stride-2 convs, 1/8 resolution bottleneck.
  Tensor x = normalized(ad::gelu(ad::conv2d(image, params.get("enc.conv1.w"),
                                            params.get("enc.conv1.b"), 2, 1)));
  x = normalized(
      ad::gelu(ad::conv2d(x, params.get("enc.conv2.w"), params.get("enc.conv2.b"), 2, 1)));
  x = normalized(
      ad::gelu(ad::conv2d(x, params.get("enc.conv3.w"), params.get("enc.conv3.b"), 2, 1)));

  // Global average pool: flatten to [channels, pixels] and average the rows.
  const int channels = x.shape[0];
  const int pixels = x.shape[1] * x.shape[2];
  Tensor flat = ad::reshape(x, {channels, pixels});
  Tensor avg_weights = Tensor::full({pixels, 1}, 1.0 / double(pixels));
  Tensor pooled = ad::reshape(ad::matmul(flat, avg_weights), {1, channels});
  Tensor f_gap = ad::add_rowvec(ad::matmul(pooled, params.get("enc.gap.w")),
                                params.get("enc.gap.b"));
  f_gap = ad::layer_norm(f_gap, Tensor::full({config.d_gap}, 1.0),
                         Tensor::zeros({config.d_gap}));

  // Decoder: 1x1 conv at the bottleneck, then two stride-2 transposed convs.
  FeaturePyramid out;
  out.f_gap = f_gap;
  Tensor m1 = normalized(
      ad::conv2d(x, params.get("dec.map1.w"), params.get("dec.map1.b"), 1, 0));
  Tensor m2 = normalized(ad::conv_transpose2d(ad::gelu(m1), params.get("dec.map2.w"),
                                              params.get("dec.map2.b"), 2, 1));
  Tensor m3 = normalized(ad::conv_transpose2d(ad::gelu(m2), params.get("dec.map3.w"),
                                              params.get("dec.map3.b"), 2, 1));
  out.maps = {m1, m2, m3};
  return out;
}

Tensor grid_lattice(int g) {
  if (g <= 0) throw ContractError("grid_lattice: g must be positive, got " + std::to_string(g));
  std::vector<double> coords;
  coords.reserve(size_t(g) * size_t(g) * 2);
  // Integer numerator keeps the lattice exactly symmetric about 0.
  auto tick = [g](int k) {
    return g == 1 ? 0.0 : double(2 * k - (g - 1)) / double(g - 1);
  };
  for (int iy = 0; iy < g; ++iy)
    for (int ix = 0; ix < g; ++ix) {
      coords.push_back(tick(ix));
      coords.push_back(tick(iy));
    }
  return Tensor({g * g, 2}, std::move(coords));
}

Tensor grid_tokens(nn::ParamBinder& params, const std::string& prefix, const Tensor& map,
                   int level_dim, int g) {
  if (map.rank() != 3)
    throw ContractError("grid_tokens: map must be [C, H, W], got " + ad::shape_str(map.shape));
  if (g <= 0) throw ContractError("grid_tokens: g must be positive, got " + std::to_string(g));
  if (g > std::min(map.shape[1], map.shape[2]))
    throw ContractError("grid_tokens: g = " + std::to_string(g) + " exceeds the map size " +
                        std::to_string(map.shape[1]) + "x" + std::to_string(map.shape[2]));
  const Tensor& w = params.get(prefix + ".w");
  if (w.shape[0] != map.shape[0] || w.shape[1] != level_dim)
    throw ContractError("grid_tokens: projection " + prefix + ".w is " +
                        ad::shape_str(w.shape) + ", expected [" + std::to_string(map.shape[0]) +
                        ", " + std::to_string(level_dim) + "]");
  Tensor sampled = ad::bilinear_sample(map, grid_lattice(g));  // [g*g, C]
  return ad::add_rowvec(ad::matmul(sampled, w), params.get(prefix + ".b"));
}

// ---- synthetic supervision ----

namespace {

HandGroundTruth draw_hand(const hand::HandModel& model, std::uint64_t seed, const char* side) {
  Rng theta_rng = named_rng(seed, std::string("sample.theta.") + side);
  Rng beta_rng = named_rng(seed, std::string("sample.beta.") + side);
  Rng trans_rng = named_rng(seed, std::string("sample.translation.") + side);

  HandGroundTruth gt;
  gt.theta = Tensor::zeros({model.pose_dim()});
  for (int i = 0; i < model.pose_dim(); ++i) {
    // Root orientation is free; articulated joints stay in a plausible range.
    double bound = i < 3 ? 1.0 : 0.4;
    gt.theta[i] = theta_rng.uniform(-bound, bound);
  }
  gt.beta = Tensor::zeros({hand::kShapeDim});
  for (int i = 0; i < hand::kShapeDim; ++i) gt.beta[i] = beta_rng.uniform(-1.0, 1.0);
  // Both hands jitter around the origin so their projections overlap. The
  // parametric branch carries no translation output, so keeping ground truth
  // near the origin keeps the parameter-regression, parametric-vertex, and
  // cross-branch consistency terms free of an irreducible offset that their
  // gradients would otherwise chase.
  gt.translation = Tensor::zeros({3});
  for (int i = 0; i < 3; ++i) gt.translation[i] = trans_rng.uniform(-0.01, 0.01);

  hand::ManoOutput posed = hand::mano_forward(model, gt.theta, gt.beta, gt.translation);
  gt.vertices = posed.vertices;
  gt.joints = posed.joints;
  return gt;
}

}  // namespace

Tensor render_joint_splats(const Tensor& pixels, int image_size) {
  if (pixels.rank() != 2 || pixels.cols() != 2)
    throw ContractError("render_joint_splats: pixels must be [n, 2], got " +
                        ad::shape_str(pixels.shape));
  if (image_size <= 0) throw ContractError("render_joint_splats: image_size must be positive");
  constexpr double kSigma = 1.5;
  Tensor plane = Tensor::zeros({image_size, image_size});
  for (int j = 0; j < pixels.rows(); ++j) {
    double px = pixels.at(j, 0);
    double py = pixels.at(j, 1);
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        plane.data[size_t(y * image_size + x)] += std::exp(-d2 / (2.0 * kSigma * kSigma));
      }
  }
  return plane;
}

SyntheticSample synthesize_sample(const hand::HandModel& model_left, const hand::HandModel& model_right,
                                  std::uint64_t seed, int image_size) {
  check_image_size(image_size);
  SyntheticSample sample;
  sample.seed = seed;
  sample.left = draw_hand(model_left, seed, "left");
  sample.right = draw_hand(model_right, seed, "right");

  // Frame both hands: scale so the joint extent covers a seeded fraction of
  // the image and center the joint bounding box, which keeps every projected
  // joint inside the frame no matter how the joints are distributed.
  double lo_x = 1e30, hi_x = -1e30, lo_y = 1e30, hi_y = -1e30;
  for (const HandGroundTruth* gt : {&sample.left, &sample.right})
    for (int j = 0; j < gt->joints.rows(); ++j) {
      double x = gt->joints.at(j, 0), y = gt->joints.at(j, 1);
      lo_x = std::min(lo_x, x);
      hi_x = std::max(hi_x, x);
      lo_y = std::min(lo_y, y);
      hi_y = std::max(hi_y, y);
    }
  Rng cam_rng = named_rng(seed, "sample.camera");
  double extent = std::max({hi_x - lo_x, hi_y - lo_y, 1e-3});
  // Moderate coverage keeps pixels-per-meter low enough that the pixel-space
  // loss terms do not drown the metric 3D terms in the loss gradients.
  double coverage = cam_rng.uniform(0.32, 0.45);  // fraction of the frame used
  sample.camera.s = coverage * double(image_size - 1) / extent;
  sample.camera.tx =
      0.5 * double(image_size - 1) - sample.camera.s * 0.5 * (lo_x + hi_x);
  sample.camera.ty =
      0.5 * double(image_size - 1) - sample.camera.s * 0.5 * (lo_y + hi_y);

  Tensor left_plane =
      render_joint_splats(cam::project(sample.left.joints, sample.camera).detached(), image_size);
  Tensor right_plane =
      render_joint_splats(cam::project(sample.right.joints, sample.camera).detached(), image_size);
  sample.image = Tensor::zeros({3, image_size, image_size});
  const size_t plane_size = size_t(image_size) * size_t(image_size);
  for (size_t i = 0; i < plane_size; ++i) {
    sample.image.data[i] = left_plane.data[i];
    sample.image.data[plane_size + i] = right_plane.data[i];
    sample.image.data[2 * plane_size + i] = left_plane.data[i] + right_plane.data[i];
  }
  return sample;
}

namespace {

json vector_json(const Tensor& t) {
  json a = json::array();
  for (double v : t.data) a.push_back(v);
  return a;
}

}  // namespace

void save_manifest(const std::string& path, const std::vector<SyntheticSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot open manifest for writing: " + path);
  for (const SyntheticSample& s : samples) {
    json line = {
        {"seed", s.seed},
        {"camera", {{"s", s.camera.s}, {"tx", s.camera.tx}, {"ty", s.camera.ty}}},
        {"gt",
         {{"left",
           {{"theta", vector_json(s.left.theta)},
            {"beta", vector_json(s.left.beta)},
            {"translation", vector_json(s.left.translation)}}},
          {"right",
           {{"theta", vector_json(s.right.theta)},
            {"beta", vector_json(s.right.beta)},
            {"translation", vector_json(s.right.translation)}}}}},
    };
    out << line.dump() << '\n';
  }
  if (!out) throw ValidationError("failed writing manifest: " + path);
}

std::vector<SyntheticSample> load_manifest(const std::string& path,
                                           const hand::HandModel& model_left,
                                           const hand::HandModel& model_right, int image_size,
                                           int* skipped) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path);
  std::vector<SyntheticSample> samples;
  int skip_count = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json entry;
    try {
      entry = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError("manifest " + path + " line " + std::to_string(line_no) +
                            ": " + e.what());
    }
    if (!entry.contains("seed") || !entry["seed"].is_number_unsigned()) {
      ++skip_count;
      continue;  // skip with a warning count: sample cannot be regenerated
    }
    samples.push_back(synthesize_sample(model_left, model_right,
                                        entry["seed"].get<std::uint64_t>(), image_size));
  }
  if (skipped != nullptr) *skipped = skip_count;
  return samples;
}

}  // namespace handrec::img
