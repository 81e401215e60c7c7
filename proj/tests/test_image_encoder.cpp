#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "handrec/camera.hpp"
#include "handrec/gradcheck.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/image_encoder.hpp"
#include "handrec/ops.hpp"
#include "handrec/params.hpp"
#include "handrec/rng.hpp"
#include "oracles.hpp"

using namespace handrec;
using namespace handrec::ad;
using namespace handrec::img;

namespace {

constexpr std::array<int, 3> kLevelDims{64, 32, 16};

Tensor rand_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

nn::ParamStore default_store(const EncoderConfig& config = EncoderConfig{},
                             std::uint64_t seed = 11) {
  nn::ParamStore store;
  register_encoder_params(store, config, kLevelDims, seed);
  return store;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("encoder emits the documented shape law at the defaults") {
  EncoderConfig config;
  nn::ParamStore store = default_store(config);
  Rng rng(5);
  Tensor image = rand_tensor({3, 64, 64}, rng, 0.0, 1.0);

  Tape tape;
  nn::ParamBinder binder(tape, store);
  FeaturePyramid pyramid = encode(binder, config, image);

  CHECK(pyramid.f_gap.shape == std::vector<int>{1, 128});
  REQUIRE(pyramid.maps.size() == 3);
  CHECK(pyramid.maps[0].shape == std::vector<int>{64, 8, 8});
  CHECK(pyramid.maps[1].shape == std::vector<int>{32, 16, 16});
  CHECK(pyramid.maps[2].shape == std::vector<int>{16, 32, 32});
}

TEST_CASE("encoder shapes follow the config over a grid of settings") {
  for (int size : {32, 64}) {
    for (int d_gap : {32, 128}) {
      EncoderConfig config;
      config.image_size = size;
      config.d_gap = d_gap;
      config.enc_channels = {8, 12, 24};
      config.map_channels = {10, 6, 4};
      nn::ParamStore store;
      register_encoder_params(store, config, kLevelDims, 3);
      Rng rng(7);
      Tensor image = rand_tensor({3, size, size}, rng, 0.0, 1.0);

      Tape tape;
      nn::ParamBinder binder(tape, store);
      FeaturePyramid pyramid = encode(binder, config, image);

      CHECK(pyramid.f_gap.shape == std::vector<int>{1, d_gap});
      CHECK(pyramid.maps[0].shape == std::vector<int>{10, size / 8, size / 8});
      CHECK(pyramid.maps[1].shape == std::vector<int>{6, size / 4, size / 4});
      CHECK(pyramid.maps[2].shape == std::vector<int>{4, size / 2, size / 2});
    }
  }
}

TEST_CASE("zero image with zero-initialized biases gives an exactly zero global feature") {
  EncoderConfig config;
  nn::ParamStore store = default_store(config);
  Tensor image = Tensor::zeros({3, 64, 64});

  Tape tape;
  nn::ParamBinder binder(tape, store);
  FeaturePyramid pyramid = encode(binder, config, image);

  for (int i = 0; i < pyramid.f_gap.size(); ++i) CHECK(pyramid.f_gap[i] == 0.0);
}

TEST_CASE("encoder rejects malformed images") {
  EncoderConfig config;
  nn::ParamStore store = default_store(config);
  Tape tape;
  nn::ParamBinder binder(tape, store);

  CHECK_THROWS_AS(encode(binder, config, Tensor::zeros({3, 32, 64})), ValidationError);
  CHECK_THROWS_AS(encode(binder, config, Tensor::zeros({3, 16, 16})), ValidationError);
  CHECK_THROWS_AS(encode(binder, config, Tensor::zeros({3, 48, 48})), ValidationError);
  CHECK_THROWS_AS(encode(binder, config, Tensor::zeros({1, 64, 64})), ValidationError);
  CHECK_THROWS_AS(encode(binder, config, Tensor::zeros({64, 64})), ValidationError);
}

TEST_CASE("gradient of the pooled feature with respect to image pixels matches finite differences") {
  EncoderConfig config;
  config.image_size = 32;
  nn::ParamStore store;
  register_encoder_params(store, config, kLevelDims, 17);
  Rng rng(23);
  const Tensor base = rand_tensor({3, 32, 32}, rng, 0.0, 1.0);

  // Probe a spread of pixels instead of all 3072: z scatters into the image.
  std::vector<ScatterEntry> entries;
  Rng pick(29);
  std::set<int> used;
  while (entries.size() < 30) {
    int idx = int(pick.uniform(0.0, double(base.size())));
    if (!used.insert(idx).second) continue;
    entries.push_back({int(entries.size()), idx, 1.0});
  }

  // A random-weighted sum keeps the probe sensitive: the plain sum of the
  // normalized global feature is constant by construction.
  Rng wrng(31);
  Tensor probe_weights = rand_tensor({1, config.d_gap}, wrng, -1.0, 1.0);
  auto f = [&](Tape& tape, const Tensor& z) {
    nn::ParamBinder binder(tape, store);
    Tensor image = add(base, scatter_linear(z, entries, base.shape));
    return sum(mul(encode(binder, config, image).f_gap, probe_weights));
  };
  double err = grad_check(f, Tensor::zeros({int(entries.size())}), 1e-5);
  CHECK(err <= 1e-5);
}

TEST_CASE("grid lattice is uniform, inclusive, and exactly symmetric about zero") {
  Tensor l1 = grid_lattice(1);
  REQUIRE(l1.shape == std::vector<int>{1, 2});
  CHECK(l1.at(0, 0) == 0.0);
  CHECK(l1.at(0, 1) == 0.0);

  Tensor l4 = grid_lattice(4);
  REQUIRE(l4.shape == std::vector<int>{16, 2});
  // Corners hit the inclusive endpoints.
  CHECK(l4.at(0, 0) == -1.0);
  CHECK(l4.at(0, 1) == -1.0);
  CHECK(l4.at(15, 0) == 1.0);
  CHECK(l4.at(15, 1) == 1.0);
  // Point k mirrors point (last - k) with exact sign flips.
  for (int i = 0; i < 16; ++i) {
    CHECK(l4.at(i, 0) == -l4.at(15 - i, 0));
    CHECK(l4.at(i, 1) == -l4.at(15 - i, 1));
  }
}

TEST_CASE("g=1 on a constant map yields the projected constant") {
  nn::ParamStore store;
  store.create("p.w", {3, 4}, nn::Init::kFanIn, 31);
  store.create("p.b", {4}, nn::Init::kFanIn, 31);
  Tensor map = Tensor::zeros({3, 5, 5});
  std::array<double, 3> channel_value{0.3, -1.2, 2.5};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 25; ++i) map.data[size_t(c * 25 + i)] = channel_value[size_t(c)];

  Tape tape;
  nn::ParamBinder binder(tape, store);
  Tensor tokens = grid_tokens(binder, "p", map, 4, 1);

  REQUIRE(tokens.shape == std::vector<int>{1, 4});
  const Tensor& w = store.value("p.w");
  const Tensor& b = store.value("p.b");
  for (int d = 0; d < 4; ++d) {
    double expect = b[d];
    for (int c = 0; c < 3; ++c) expect += channel_value[size_t(c)] * w.at(c, d);
    CHECK(std::fabs(tokens[d] - expect) <= 1e-12);
  }
}

TEST_CASE("grid tokens equal a brute-force sample-then-project composition") {
  nn::ParamStore store;
  store.create("p.w", {3, 5}, nn::Init::kFanIn, 41);
  store.create("p.b", {5}, nn::Init::kFanIn, 43);
  Rng rng(47);
  Tensor map = rand_tensor({3, 7, 5}, rng);

  const int g = 5;
  Tape tape;
  nn::ParamBinder binder(tape, store);
  Tensor tokens = grid_tokens(binder, "p", map, 5, g);
  REQUIRE(tokens.shape == std::vector<int>{25, 5});

  Tensor lattice = grid_lattice(g);
  std::vector<double> sampled(size_t(g * g) * 3);
  for (int p = 0; p < g * g; ++p)
    for (int c = 0; c < 3; ++c) {
      std::vector<double> plane(map.data.begin() + c * 35, map.data.begin() + (c + 1) * 35);
      sampled[size_t(p * 3 + c)] =
          oracle::bilinear_at(plane, 7, 5, lattice.at(p, 0), lattice.at(p, 1));
    }
  std::vector<double> projected =
      oracle::matmul(sampled, g * g, 3, store.value("p.w").data, 5);
  for (int p = 0; p < g * g; ++p)
    for (int d = 0; d < 5; ++d)
      CHECK(std::fabs(tokens.at(p, d) - (projected[size_t(p * 5 + d)] +
                                         store.value("p.b")[d])) <= 1e-12);
}

TEST_CASE("grid tokens produce g^2 rows and reject invalid grids") {
  EncoderConfig config;
  nn::ParamStore store = default_store(config);
  Rng rng(53);
  Tensor map = rand_tensor({64, 8, 8}, rng);

  Tape tape;
  nn::ParamBinder binder(tape, store);
  Tensor tokens = grid_tokens(binder, "grid.l1", map, kLevelDims[0], 4);
  CHECK(tokens.shape == std::vector<int>{16, 64});

  CHECK_THROWS_AS(grid_tokens(binder, "grid.l1", map, kLevelDims[0], 0), ContractError);
  CHECK_THROWS_AS(grid_tokens(binder, "grid.l1", map, kLevelDims[0], 9), ContractError);
}

TEST_CASE("synthetic samples are deterministic in the seed and differ across seeds") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);

  SyntheticSample a = synthesize_sample(left, right, 101, 32);
  SyntheticSample b = synthesize_sample(left, right, 101, 32);
  CHECK(max_abs_diff(a.image, b.image) == 0.0);
  CHECK(max_abs_diff(a.left.theta, b.left.theta) == 0.0);
  CHECK(max_abs_diff(a.right.beta, b.right.beta) == 0.0);
  CHECK(a.camera.s == b.camera.s);
  CHECK(a.camera.tx == b.camera.tx);
  CHECK(a.camera.ty == b.camera.ty);

  SyntheticSample c = synthesize_sample(left, right, 102, 32);
  CHECK(max_abs_diff(a.left.theta, c.left.theta) > 0.0);
  CHECK(max_abs_diff(a.right.theta, c.right.theta) > 0.0);
  // The two hands of one sample use independent draws too.
  CHECK(max_abs_diff(a.left.theta, a.right.theta) > 0.0);
}

TEST_CASE("synthetic ground truth is self-consistent with the parametric layer") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);
  SyntheticSample s = synthesize_sample(left, right, 7, 32);

  hand::ManoOutput l = hand::mano_forward(left, s.left.theta, s.left.beta, s.left.translation);
  hand::ManoOutput r =
      hand::mano_forward(right, s.right.theta, s.right.beta, s.right.translation);
  CHECK(max_abs_diff(l.vertices, s.left.vertices) <= 1e-9);
  CHECK(max_abs_diff(l.joints, s.left.joints) <= 1e-9);
  CHECK(max_abs_diff(r.vertices, s.right.vertices) <= 1e-9);
  CHECK(max_abs_diff(r.joints, s.right.joints) <= 1e-9);

  // Articulated angles stay in the sampling range; root is merely bounded.
  for (int i = 3; i < s.left.theta.size(); ++i) CHECK(std::fabs(s.left.theta[i]) <= 0.4);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(s.left.theta[i]) <= 1.0);
}

TEST_CASE("camera framing keeps every projected joint inside the image") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);
  for (std::uint64_t seed : {11ull, 12ull, 13ull, 14ull}) {
    SyntheticSample s = synthesize_sample(left, right, seed, 64);
    CHECK(s.camera.s > 0.0);
    for (const HandGroundTruth* gt : {&s.left, &s.right}) {
      Tensor px = cam::project(gt->joints, s.camera);
      for (int j = 0; j < px.rows(); ++j) {
        CHECK(px.at(j, 0) >= 0.0);
        CHECK(px.at(j, 0) <= 63.0);
        CHECK(px.at(j, 1) >= 0.0);
        CHECK(px.at(j, 1) <= 63.0);
      }
    }
  }
}

TEST_CASE("splat rendering peaks at the projected joint pixel") {
  // Single joint at a known sub-pixel position: the brightest pixel must be
  // the rounded projection.
  Tensor one({1, 2}, {17.3, 40.8});
  Tensor plane = render_joint_splats(one, 64);
  int best = 0;
  for (int i = 1; i < plane.size(); ++i)
    if (plane[i] > plane[best]) best = i;
  CHECK(best % 64 == 17);  // x
  CHECK(best / 64 == 41);  // y

  // Full-field brute force against independent loops.
  Rng rng(59);
  Tensor pts = rand_tensor({5, 2}, rng, 4.0, 28.0);
  Tensor rendered = render_joint_splats(pts, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double expect = 0.0;
      for (int j = 0; j < 5; ++j) {
        double dx = x - pts.at(j, 0), dy = y - pts.at(j, 1);
        expect += std::exp(-(dx * dx + dy * dy) / 4.5);
      }
      CHECK(std::fabs(rendered.at(y, x) - expect) <= 1e-12);
    }
}

TEST_CASE("sample image channels are per-hand renders plus their shared sum") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);
  SyntheticSample s = synthesize_sample(left, right, 21, 32);

  Tensor left_plane = render_joint_splats(cam::project(s.left.joints, s.camera), 32);
  Tensor right_plane = render_joint_splats(cam::project(s.right.joints, s.camera), 32);
  const size_t n = 32 * 32;
  for (size_t i = 0; i < n; ++i) {
    CHECK(s.image.data[i] == left_plane.data[i]);
    CHECK(s.image.data[n + i] == right_plane.data[i]);
    CHECK(s.image.data[2 * n + i] == left_plane.data[i] + right_plane.data[i]);
  }
  // Both hands must actually leave a mark (overlapping projections in frame).
  double left_mass = 0.0, right_mass = 0.0;
  for (size_t i = 0; i < n; ++i) {
    left_mass += s.image.data[i];
    right_mass += s.image.data[n + i];
  }
  CHECK(left_mass > 1.0);
  CHECK(right_mass > 1.0);
}

TEST_CASE("manifest round-trips samples through seeds") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);
  std::vector<SyntheticSample> samples;
  for (std::uint64_t seed : {31ull, 32ull, 33ull}) {
    samples.push_back(synthesize_sample(left, right, seed, 32));
  }
  const std::string path = "manifest_roundtrip_test.jsonl";
  save_manifest(path, samples);

  int skipped = -1;
  std::vector<SyntheticSample> loaded = load_manifest(path, left, right, 32, &skipped);
  REQUIRE(loaded.size() == 3);
  CHECK(skipped == 0);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(max_abs_diff(loaded[i].image, samples[i].image) == 0.0);
    CHECK(max_abs_diff(loaded[i].left.theta, samples[i].left.theta) == 0.0);
    CHECK(max_abs_diff(loaded[i].right.beta, samples[i].right.beta) == 0.0);
    CHECK(max_abs_diff(loaded[i].left.vertices, samples[i].left.vertices) == 0.0);
    CHECK(loaded[i].camera.s == samples[i].camera.s);
  }
  std::remove(path.c_str());
}

TEST_CASE("manifest lines without a seed are skipped with a count") {
  hand::HandModel right = hand::synthesize_model(3, 40, 7);
  hand::HandModel left = hand::mirrored(right);
  const std::string path = "manifest_skip_test.jsonl";
  {
    std::vector<SyntheticSample> samples = {synthesize_sample(left, right, 77, 32)};
    save_manifest(path, samples);
    FILE* f = std::fopen(path.c_str(), "a");
    REQUIRE(f != nullptr);
    std::fputs("{\"camera\": {\"s\": 1.0}}\n", f);
    std::fclose(f);
  }
  int skipped = -1;
  std::vector<SyntheticSample> loaded = load_manifest(path, left, right, 32, &skipped);
  CHECK(loaded.size() == 1);
  CHECK(skipped == 1);
  CHECK(loaded[0].seed == 77);
  std::remove(path.c_str());
}

TEST_CASE("parameter store initializes deterministically and independent of creation order") {
  nn::ParamStore a;
  a.create("x.w", {4, 6}, nn::Init::kFanIn, 3);
  a.create("y.w", {4, 6}, nn::Init::kFanIn, 3);
  nn::ParamStore b;
  b.create("y.w", {4, 6}, nn::Init::kFanIn, 3);
  b.create("x.w", {4, 6}, nn::Init::kFanIn, 3);

  CHECK(max_abs_diff(a.value("x.w"), b.value("x.w")) == 0.0);
  CHECK(max_abs_diff(a.value("y.w"), b.value("y.w")) == 0.0);
  // Different names draw different streams; same name with another seed too.
  CHECK(max_abs_diff(a.value("x.w"), a.value("y.w")) > 0.0);
  nn::ParamStore c;
  c.create("x.w", {4, 6}, nn::Init::kFanIn, 4);
  CHECK(max_abs_diff(a.value("x.w"), c.value("x.w")) > 0.0);

  // Variance-preserving bound: [4, 6] weights stay within sqrt(3/4).
  for (double v : a.value("x.w").data) CHECK(std::fabs(v) <= std::sqrt(0.75));
  CHECK_THROWS_AS(a.create("x.w", {2}, nn::Init::kZero, 3), ContractError);
  CHECK_THROWS_AS(a.value("missing.w"), ContractError);
}

TEST_CASE("binder binds each parameter once and reports gradients") {
  nn::ParamStore store;
  store.create("m.w", {3, 3}, nn::Init::kFanIn, 5);
  store.create("m.b", {3}, nn::Init::kZero, 5);
  store.create("m.unused", {2}, nn::Init::kOne, 5);

  Tape tape;
  nn::ParamBinder binder(tape, store);
  const Tensor& w1 = binder.get("m.w");
  const Tensor& w2 = binder.get("m.w");
  CHECK(w1.node == w2.node);

  Tensor x = Tensor::full({1, 3}, 1.0);
  Tensor y = sum(add_rowvec(matmul(x, binder.get("m.w")), binder.get("m.b")));
  tape.backward(y);
  auto grads = binder.gradients();
  REQUIRE(grads.count("m.w") == 1);
  REQUIRE(grads.count("m.b") == 1);
  CHECK(grads.count("m.unused") == 0);
  for (int i = 0; i < 9; ++i) CHECK(grads["m.w"][i] == 1.0);  // d(sum)/dW = x^T 1
  for (int i = 0; i < 3; ++i) CHECK(grads["m.b"][i] == 1.0);
}

TEST_CASE("checkpoints round-trip bitwise and reject shape mismatches") {
  nn::ParamStore store;
  store.create("a.w", {3, 4}, nn::Init::kFanIn, 13);
  store.create("a.b", {4}, nn::Init::kFanIn, 13);
  const std::string path = "checkpoint_roundtrip_test.bin";
  nn::save_checkpoint(path, store, "{\"preset\": \"desk\"}", 42);

  nn::CheckpointData data = nn::load_checkpoint(path);
  CHECK(data.config_json == "{\"preset\": \"desk\"}");
  CHECK(data.step == 42);
  REQUIRE(data.tensors.size() == 2);
  CHECK(max_abs_diff(data.tensors.at("a.w"), store.value("a.w")) == 0.0);

  nn::ParamStore fresh;
  fresh.create("a.w", {3, 4}, nn::Init::kZero, 0);
  fresh.create("a.b", {4}, nn::Init::kZero, 0);
  nn::apply_checkpoint(fresh, data);
  CHECK(max_abs_diff(fresh.value("a.w"), store.value("a.w")) == 0.0);
  CHECK(max_abs_diff(fresh.value("a.b"), store.value("a.b")) == 0.0);

  nn::ParamStore wrong;
  wrong.create("a.w", {3, 4}, nn::Init::kZero, 0);
  wrong.create("a.b", {5}, nn::Init::kZero, 0);
  try {
    nn::apply_checkpoint(wrong, data);
    FAIL("expected a shape mismatch error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("a.b") != std::string::npos);
  }

  nn::ParamStore missing;
  missing.create("a.w", {3, 4}, nn::Init::kZero, 0);
  CHECK_THROWS_AS(nn::apply_checkpoint(missing, data), ValidationError);

  // Corrupt magic.
  {
    FILE* f = std::fopen(path.c_str(), "r+b");
    REQUIRE(f != nullptr);
    std::fputc('X', f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(nn::load_checkpoint(path), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("projection drops depth and applies scale plus translation") {
  Tensor v({2, 3}, {1.0, 1.0, 5.0, -2.0, 0.5, 9.0});

  cam::Camera identity_cam;
  Tensor p0 = cam::project(v, identity_cam);
  CHECK(p0.at(0, 0) == 1.0);
  CHECK(p0.at(0, 1) == 1.0);
  CHECK(p0.at(1, 0) == -2.0);
  CHECK(p0.at(1, 1) == 0.5);

  cam::Camera c{2.0, 10.0, 10.0};
  Tensor p = cam::project(v, c);
  CHECK(p.at(0, 0) == 12.0);
  CHECK(p.at(0, 1) == 12.0);

  // Pixel -> normalized, align-corners: 0 -> -1, size-1 -> +1, center -> 0.
  Tensor px({2, 2}, {0.0, 63.0, 31.5, 31.5});
  Tensor n = cam::pixels_to_normalized(px, 64);
  CHECK(n.at(0, 0) == -1.0);
  CHECK(n.at(0, 1) == 1.0);
  CHECK(std::fabs(n.at(1, 0)) <= 1e-15);

  auto f = [&](Tape&, const Tensor& x) {
    return sum(cam::pixels_to_normalized(cam::project(x, c), 64));
  };
  CHECK(grad_check(f, v, 1e-5) <= 1e-9);
}
