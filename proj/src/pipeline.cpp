#include "handrec/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "handrec/gradcheck.hpp"
#include "handrec/obj_io.hpp"
#include "handrec/rng.hpp"
#include "json.hpp"

namespace handrec::run {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- Adam ----

void Adam::step(nn::ParamStore& store, const std::map<std::string, ad::Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (const auto& [name, g] : grads) {
    ad::Tensor& param = store.value(name);
    if (g.size() != param.size()) {
      throw ContractError("Adam: gradient for '" + name + "' has " + std::to_string(g.size()) +
                          " values, parameter has " + std::to_string(param.size()));
    }
    std::vector<double>& m = m_[name];
    std::vector<double>& v = v_[name];
    if (m.empty()) {
      m.assign(g.data.size(), 0.0);
      v.assign(g.data.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double gi = g.data[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      param.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---- pipeline assembly ----

Pipeline build_pipeline(const cfg::RunConfig& config) {
  cfg::validate_config(config);
  Pipeline p;
  p.config = config;
  p.right_model = hand::load_or_synthesize_model(config.model_path, config.model_seed,
                                                 config.model_vertices, config.model_joints);
  p.left_model = hand::mirrored(p.right_model);
  p.hierarchy = hier::build_hierarchy(p.right_model, config.hierarchy_levels);

  p.encoder.image_size = config.image_size;
  p.encoder.d_gap = config.d_gap;
  p.encoder.enc_channels = config.enc_channels;
  p.encoder.map_channels = config.map_channels;

  p.stack.level_dims = config.level_dims;
  p.stack.d_gap = config.d_gap;
  p.stack.grid_size = config.grid_size;
  p.stack.depth = config.encoder_depth;
  p.stack.pose_dim = p.right_model.pose_dim();

  p.refiner.token_dim = config.level_dims[2];
  p.refiner.d_r = config.d_r;
  p.refiner.map_channels = config.map_channels;
  p.refiner.image_size = config.image_size;
  p.refiner.iterations = config.refine_iterations;
  p.refiner.depth = config.encoder_depth;
  p.refiner.pose_dim = p.right_model.pose_dim();
  return p;
}

void register_pipeline_params(nn::ParamStore& store, const Pipeline& p) {
  img::register_encoder_params(store, p.encoder, p.config.level_dims, p.config.seed);
  mmib::register_stack_params(store, p.stack, p.hierarchy.levels.front().count, p.config.seed);
  refine::register_refine_params(store, p.refiner, p.config.seed);
}

refine::Prediction pipeline_forward(nn::ParamBinder& params, const Pipeline& p,
                                    const ad::Tensor& image, const cam::Camera& camera) {
  img::FeaturePyramid pyramid = img::encode(params, p.encoder, image);
  mmib::StackOutput stage = mmib::stack_forward(params, p.stack, pyramid, p.hierarchy);
  return refine::refine_forward(params, p.refiner, stage, camera, pyramid,
                                p.hierarchy.levels.back().laplacian);
}

std::pair<loss::HandLossInputs, loss::HandLossInputs> loss_inputs(
    const Pipeline& p, const refine::Prediction& pred, const img::SyntheticSample& sample) {
  loss::HandLossInputs left;
  left.pred_vertices = pred.vertices_left;
  left.pred_theta = pred.theta_left;
  left.pred_beta = pred.beta_left;
  left.gt_vertices = sample.left.vertices;
  left.gt_theta = sample.left.theta;
  left.gt_beta = sample.left.beta;
  left.model = &p.left_model;

  loss::HandLossInputs right;
  right.pred_vertices = pred.vertices_right;
  right.pred_theta = pred.theta_right;
  right.pred_beta = pred.beta_right;
  right.gt_vertices = sample.right.vertices;
  right.gt_theta = sample.right.theta;
  right.gt_beta = sample.right.beta;
  right.model = &p.right_model;
  return {left, right};
}

// ---- shared helpers ----

namespace {

refine::Prediction detach_prediction(const refine::Prediction& pred) {
  refine::Prediction out;
  out.vertices_left = pred.vertices_left.detached();
  out.vertices_right = pred.vertices_right.detached();
  out.theta_left = pred.theta_left.detached();
  out.theta_right = pred.theta_right.detached();
  out.beta_left = pred.beta_left.detached();
  out.beta_right = pred.beta_right.detached();
  out.camera = pred.camera;
  return out;
}

// Value-only forward pass (constants in, constants out).
refine::Prediction forward_detached(const Pipeline& p, const nn::ParamStore& store,
                                    const img::SyntheticSample& sample) {
  ad::Tape tape;
  nn::ParamBinder binder(tape, store);
  return detach_prediction(pipeline_forward(binder, p, sample.image, sample.camera));
}

std::vector<img::SyntheticSample> training_set(const cfg::RunConfig& config, const Pipeline& p,
                                               int* skipped) {
  if (!config.manifest_path.empty()) {
    std::vector<img::SyntheticSample> samples = img::load_manifest(
        config.manifest_path, p.left_model, p.right_model, config.image_size, skipped);
    if (samples.empty()) {
      throw ValidationError("manifest '" + config.manifest_path + "' holds no usable samples");
    }
    return samples;
  }
  std::vector<img::SyntheticSample> samples;
  samples.reserve(std::size_t(config.samples));
  for (int i = 0; i < config.samples; ++i) {
    samples.push_back(img::synthesize_sample(p.left_model, p.right_model,
                                             config.seed * 1000003ull + std::uint64_t(i),
                                             config.image_size));
  }
  return samples;
}

void add_into(loss::LossReport& acc, const loss::LossReport& r) {
  acc.l_v += r.l_v;
  acc.l_j += r.l_j;
  acc.l_n += r.l_n;
  acc.l_e += r.l_e;
  acc.l_p += r.l_p;
  acc.l_v_mano += r.l_v_mano;
  acc.l_consist += r.l_consist;
  acc.total += r.total;
  acc.degenerate_faces += r.degenerate_faces;  // summed count, not averaged
}

void scale_terms(loss::LossReport& r, double c) {
  r.l_v *= c;
  r.l_j *= c;
  r.l_n *= c;
  r.l_e *= c;
  r.l_p *= c;
  r.l_v_mano *= c;
  r.l_consist *= c;
  r.total *= c;
}

std::string join(const std::string& dir, const char* name) {
  return (fs::path(dir) / name).string();
}

void ensure_parent_dir(const std::string& file) {
  fs::path parent = fs::path(file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

double rel_err(double a, double n) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-8});
}

}  // namespace

// ---- train-overfit ----

TrainResult train_overfit(const cfg::RunConfig& config) {
  Pipeline p = build_pipeline(config);
  fs::create_directories(config.out_dir);

  int skipped = 0;
  std::vector<img::SyntheticSample> samples = training_set(config, p, &skipped);
  const double inv_n = 1.0 / double(samples.size());

  nn::ParamStore store;
  register_pipeline_params(store, p);

  TrainResult result;
  result.checkpoint_file = config.checkpoint_path.empty() ? join(config.out_dir, "checkpoint.mmhd")
                                                          : config.checkpoint_path;
  result.curve_file = join(config.out_dir, "loss_curve.csv");
  result.manifest_file = join(config.out_dir, "train_manifest.json");
  ensure_parent_dir(result.checkpoint_file);
  img::save_manifest(result.manifest_file, samples);

  std::ofstream csv(result.curve_file);
  if (!csv) throw ValidationError("cannot write loss curve '" + result.curve_file + "'");
  csv << "step,L_V,L_J,L_N,L_E,L_P,L_Vmano,L_consist,total\n";

  // Mean loss over the set; when grad_sum is given, also backpropagates and
  // accumulates parameter gradients sample by sample (fixed order, so reruns
  // are bitwise identical).
  auto evaluate = [&](std::map<std::string, std::vector<double>>* grad_sum,
                      loss::LossReport* mean) {
    loss::LossReport acc{};
    for (const img::SyntheticSample& sample : samples) {
      ad::Tape tape;
      nn::ParamBinder binder(tape, store);
      refine::Prediction pred = pipeline_forward(binder, p, sample.image, sample.camera);
      auto inputs = loss_inputs(p, pred, sample);
      loss::LossTerms terms = loss::compute_losses(inputs.first, inputs.second, sample.camera);
      ad::Tensor total = loss::total_loss(terms, config.weights);  // NumericError on NaN
      add_into(acc, loss::report_of(terms, config.weights));
      if (grad_sum != nullptr) {
        tape.backward(total);
        for (const auto& [name, g] : binder.gradients()) {
          std::vector<double>& slot = (*grad_sum)[name];
          if (slot.empty()) slot.assign(g.data.size(), 0.0);
          for (std::size_t i = 0; i < g.data.size(); ++i) slot[i] += g.data[i];
        }
      }
    }
    scale_terms(acc, inv_n);
    *mean = acc;
  };

  // Parameters that most recently produced a finite loss (the abort artifact).
  std::map<std::string, std::vector<double>> last_good;
  std::uint64_t last_good_step = 0;
  auto snapshot = [&](std::uint64_t step_counter) {
    last_good.clear();
    for (const auto& [name, t] : store.all()) last_good[name] = t.data;
    last_good_step = step_counter;
  };
  snapshot(0);  // fallback if the very first evaluation is already non-finite

  Adam adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
  char row[512];
  try {
    for (int step = 0; step < config.steps; ++step) {
      std::map<std::string, std::vector<double>> grad_sum;
      loss::LossReport mean{};
      evaluate(&grad_sum, &mean);
      snapshot(std::uint64_t(step));
      std::snprintf(row, sizeof row, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    step, mean.l_v, mean.l_j, mean.l_n, mean.l_e, mean.l_p, mean.l_v_mano,
                    mean.l_consist, mean.total);
      csv << row;
      result.curve.push_back(mean);

      std::map<std::string, ad::Tensor> grads;
      for (auto& [name, values] : grad_sum) {
        for (double& x : values) x *= inv_n;
        grads.emplace(name, ad::Tensor(store.value(name).shape, std::move(values)));
      }
      adam.step(store, grads);
      result.steps_completed = step + 1;
    }
    loss::LossReport final_report{};
    evaluate(nullptr, &final_report);
    result.final_total = final_report.total;
    snapshot(std::uint64_t(config.steps));
  } catch (const NumericError& e) {
    result.aborted = true;
    result.abort_reason = e.what();
    if (!result.curve.empty()) result.final_total = result.curve.back().total;
  }

  for (const auto& [name, values] : last_good) store.value(name).data = values;
  nn::save_checkpoint(result.checkpoint_file, store, cfg::config_to_json_text(config),
                      last_good_step);
  return result;
}

// ---- gradcheck ----

namespace {

ad::Tensor rnd(Rng& r, const std::vector<int>& shape, double lo, double hi) {
  ad::Tensor t = ad::Tensor::zeros(shape);
  for (double& x : t.data) x = r.uniform(lo, hi);
  return t;
}

// Collects per-op maxima so an op checked from several argument positions
// still reports one line.
class Sweep {
 public:
  Sweep(std::vector<std::pair<std::string, double>>& entries, double eps)
      : entries_(&entries), eps_(eps) {}

  void check(const std::string& op, const ad::ScalarFn& f, const ad::Tensor& x) {
    double e = ad::grad_check(f, x, eps_);
    for (auto& entry : *entries_) {
      if (entry.first == op) {
        entry.second = std::max(entry.second, e);
        return;
      }
    }
    entries_->push_back({op, e});
  }

 private:
  std::vector<std::pair<std::string, double>>* entries_;
  double eps_;
};

// Reduces any tensor to a scalar with fixed random weights, so every output
// coordinate influences the checked value.
ad::ScalarFn weighted(const ad::Tensor& c, std::function<ad::Tensor(ad::Tape&, const ad::Tensor&)> g) {
  return [c, g](ad::Tape& tape, const ad::Tensor& x) {
    return ad::sum(ad::mul(g(tape, x), c));
  };
}

void sweep_primitives(std::uint64_t seed, std::vector<std::pair<std::string, double>>& entries) {
  const double eps = 1e-5;
  Sweep sweep(entries, eps);
  auto stream = [seed](const char* op) { return named_rng(seed, std::string("gc.op.") + op); };

  {
    Rng r = stream("add");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), b = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("add", weighted(c, [b](ad::Tape&, const ad::Tensor& x) { return ad::add(x, b); }), a);
    sweep.check("add", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::add(a, x); }), b);
  }
  {
    Rng r = stream("sub");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), b = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("sub", weighted(c, [b](ad::Tape&, const ad::Tensor& x) { return ad::sub(x, b); }), a);
    sweep.check("sub", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::sub(a, x); }), b);
  }
  {
    Rng r = stream("mul");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), b = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("mul", weighted(c, [b](ad::Tape&, const ad::Tensor& x) { return ad::mul(x, b); }), a);
    sweep.check("mul", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::mul(a, x); }), b);
  }
  {
    Rng r = stream("div");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    ad::Tensor b = rnd(r, {3, 4}, 0.7, 1.5);  // denominators away from zero
    sweep.check("div", weighted(c, [b](ad::Tape&, const ad::Tensor& x) { return ad::div(x, b); }), a);
    sweep.check("div", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::div(a, x); }), b);
  }
  {
    Rng r = stream("neg");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("neg", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::neg(x); }), a);
  }
  {
    Rng r = stream("scale");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("scale", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::scale(x, 1.7); }), a);
  }
  {
    Rng r = stream("add_scalar");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("add_scalar",
                weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::add_scalar(x, 0.3); }), a);
  }
  {
    Rng r = stream("smul");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    ad::Tensor s({1}, {r.uniform(0.5, 1.5)});
    sweep.check("smul", weighted(c, [s](ad::Tape&, const ad::Tensor& x) { return ad::smul(x, s); }), a);
    sweep.check("smul", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::smul(a, x); }), s);
  }
  {
    Rng r = stream("abs");
    ad::Tensor a = ad::Tensor::zeros({3, 4});  // magnitudes bounded away from the kink at zero
    for (int i = 0; i < a.size(); ++i) a[i] = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.5, 1.5);
    ad::Tensor c = rnd(r, {3, 4}, -1, 1);
    sweep.check("abs", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::abs_(x); }), a);
  }
  {
    Rng r = stream("sqrt");
    ad::Tensor a = rnd(r, {3, 4}, 0.5, 2.0), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("sqrt", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::sqrt_(x); }), a);
  }
  {
    Rng r = stream("sin");
    ad::Tensor a = rnd(r, {3, 4}, -2, 2), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("sin", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::sin_(x); }), a);
  }
  {
    Rng r = stream("cos");
    ad::Tensor a = rnd(r, {3, 4}, -2, 2), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("cos", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::cos_(x); }), a);
  }
  {
    Rng r = stream("gelu");
    ad::Tensor a = rnd(r, {3, 4}, -2, 2), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("gelu", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::gelu(x); }), a);
  }
  {
    Rng r = stream("matmul");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), b = rnd(r, {4, 2}, -1, 1), c = rnd(r, {3, 2}, -1, 1);
    sweep.check("matmul", weighted(c, [b](ad::Tape&, const ad::Tensor& x) { return ad::matmul(x, b); }), a);
    sweep.check("matmul", weighted(c, [a](ad::Tape&, const ad::Tensor& x) { return ad::matmul(a, x); }), b);
  }
  {
    Rng r = stream("transpose");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {4, 3}, -1, 1);
    sweep.check("transpose", weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::transpose(x); }), a);
  }
  {
    Rng r = stream("reshape");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {2, 6}, -1, 1);
    sweep.check("reshape",
                weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::reshape(x, {2, 6}); }), a);
  }
  {
    Rng r = stream("sparse_matmul");
    ad::SparseMatrix m;
    m.rows = 4;
    m.cols = 3;
    m.entries = {{0, 0, 1.2}, {0, 2, -0.7}, {1, 1, 0.5}, {2, 0, 0.3}, {2, 1, 0.9}, {3, 2, 2.0}};
    ad::Tensor a = rnd(r, {3, 2}, -1, 1), c = rnd(r, {4, 2}, -1, 1);
    sweep.check("sparse_matmul",
                weighted(c, [m](ad::Tape&, const ad::Tensor& x) { return ad::sparse_matmul(m, x); }), a);
  }
  {
    Rng r = stream("add_rowvec");
    ad::Tensor t = rnd(r, {3, 4}, -1, 1), v = rnd(r, {4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("add_rowvec", weighted(c, [v](ad::Tape&, const ad::Tensor& x) { return ad::add_rowvec(x, v); }), t);
    sweep.check("add_rowvec", weighted(c, [t](ad::Tape&, const ad::Tensor& x) { return ad::add_rowvec(t, x); }), v);
  }
  {
    Rng r = stream("mul_rowvec");
    ad::Tensor t = rnd(r, {3, 4}, -1, 1), v = rnd(r, {4}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("mul_rowvec", weighted(c, [v](ad::Tape&, const ad::Tensor& x) { return ad::mul_rowvec(x, v); }), t);
    sweep.check("mul_rowvec", weighted(c, [t](ad::Tape&, const ad::Tensor& x) { return ad::mul_rowvec(t, x); }), v);
  }
  {
    Rng r = stream("mul_colvec");
    ad::Tensor t = rnd(r, {3, 4}, -1, 1), v = rnd(r, {3}, -1, 1), c = rnd(r, {3, 4}, -1, 1);
    sweep.check("mul_colvec", weighted(c, [v](ad::Tape&, const ad::Tensor& x) { return ad::mul_colvec(x, v); }), t);
    sweep.check("mul_colvec", weighted(c, [t](ad::Tape&, const ad::Tensor& x) { return ad::mul_colvec(t, x); }), v);
  }
  {
    Rng r = stream("sum");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1);
    sweep.check("sum", [](ad::Tape&, const ad::Tensor& x) { return ad::sum(x); }, a);
  }
  {
    Rng r = stream("mean");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1);
    sweep.check("mean", [](ad::Tape&, const ad::Tensor& x) { return ad::mean(x); }, a);
  }
  {
    Rng r = stream("concat_rows");
    ad::Tensor a = rnd(r, {2, 3}, -1, 1), b = rnd(r, {3, 3}, -1, 1), c = rnd(r, {5, 3}, -1, 1);
    sweep.check("concat_rows", weighted(c, [b](ad::Tape&, const ad::Tensor& x) {
                  return ad::concat_rows({x, b});
                }), a);
    sweep.check("concat_rows", weighted(c, [a](ad::Tape&, const ad::Tensor& x) {
                  return ad::concat_rows({a, x});
                }), b);
  }
  {
    Rng r = stream("concat_cols");
    ad::Tensor a = rnd(r, {3, 2}, -1, 1), b = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 6}, -1, 1);
    sweep.check("concat_cols", weighted(c, [b](ad::Tape&, const ad::Tensor& x) {
                  return ad::concat_cols(x, b);
                }), a);
    sweep.check("concat_cols", weighted(c, [a](ad::Tape&, const ad::Tensor& x) {
                  return ad::concat_cols(a, x);
                }), b);
  }
  {
    Rng r = stream("slice_rows");
    ad::Tensor a = rnd(r, {4, 3}, -1, 1), c = rnd(r, {2, 3}, -1, 1);
    sweep.check("slice_rows",
                weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::slice_rows(x, 1, 3); }), a);
  }
  {
    Rng r = stream("slice_cols");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {3, 2}, -1, 1);
    sweep.check("slice_cols",
                weighted(c, [](ad::Tape&, const ad::Tensor& x) { return ad::slice_cols(x, 1, 3); }), a);
  }
  {
    Rng r = stream("index_rows");
    ad::Tensor a = rnd(r, {3, 4}, -1, 1), c = rnd(r, {4, 4}, -1, 1);
    std::vector<int> idx{2, 0, 2, 1};  // repeat forces gradient accumulation
    sweep.check("index_rows",
                weighted(c, [idx](ad::Tape&, const ad::Tensor& x) { return ad::index_rows(x, idx); }), a);
  }
  {
    Rng r = stream("gather");
    ad::Tensor a = rnd(r, {6}, -1, 1), c = rnd(r, {5}, -1, 1);
    std::vector<int> idx{5, 0, 3, 3, 1};
    sweep.check("gather",
                weighted(c, [idx](ad::Tape&, const ad::Tensor& x) { return ad::gather(x, idx); }), a);
  }
  {
    Rng r = stream("scatter_linear");
    ad::Tensor a = rnd(r, {4}, -1, 1), c = rnd(r, {5}, -1, 1);
    std::vector<ad::ScatterEntry> entries_v{
        {0, 1, 2.0}, {1, 1, -1.0}, {2, 3, 0.5}, {3, 0, 1.5}, {0, 4, 1.0}};
    sweep.check("scatter_linear", weighted(c, [entries_v](ad::Tape&, const ad::Tensor& x) {
                  return ad::scatter_linear(x, entries_v, {5});
                }), a);
  }
  {
    Rng r = stream("masked_softmax");
    ad::Tensor a = rnd(r, {2, 3, 4}, -1, 1), c = rnd(r, {2, 3, 4}, -1, 1);
    ad::AttentionMask mask = ad::AttentionMask::all(3, 4);
    mask.set(0, 1, false);
    mask.set(1, 0, false);
    mask.set(2, 3, false);
    mask.set(2, 0, false);
    sweep.check("masked_softmax", weighted(c, [mask](ad::Tape&, const ad::Tensor& x) {
                  return ad::masked_softmax(x, mask);
                }), a);
  }
  {
    Rng r = stream("layer_norm");
    ad::Tensor x0 = rnd(r, {3, 5}, -1, 1), g = rnd(r, {5}, 0.5, 1.5), b = rnd(r, {5}, -0.5, 0.5);
    ad::Tensor c = rnd(r, {3, 5}, -1, 1);
    sweep.check("layer_norm", weighted(c, [g, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::layer_norm(x, g, b);
                }), x0);
    sweep.check("layer_norm", weighted(c, [x0, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::layer_norm(x0, x, b);
                }), g);
    sweep.check("layer_norm", weighted(c, [x0, g](ad::Tape&, const ad::Tensor& x) {
                  return ad::layer_norm(x0, g, x);
                }), b);
  }
  {
    Rng r = stream("bilinear_sample");
    ad::Tensor feature = rnd(r, {2, 4, 5}, -1, 1);
    // Sample points clear of texel-boundary kinks and the border clamp.
    ad::Tensor coords({3, 2}, {-0.67, -0.55, 0.12, 0.2, 0.61, 0.7});
    ad::Tensor c = rnd(r, {3, 2}, -1, 1);
    sweep.check("bilinear_sample", weighted(c, [coords](ad::Tape&, const ad::Tensor& x) {
                  return ad::bilinear_sample(x, coords);
                }), feature);
    sweep.check("bilinear_sample", weighted(c, [feature](ad::Tape&, const ad::Tensor& x) {
                  return ad::bilinear_sample(feature, x);
                }), coords);
  }
  {
    Rng r = stream("conv2d");
    ad::Tensor in = rnd(r, {2, 5, 5}, -1, 1), w = rnd(r, {3, 2, 3, 3}, -0.5, 0.5);
    ad::Tensor b = rnd(r, {3}, -0.5, 0.5), c = rnd(r, {3, 3, 3}, -1, 1);
    sweep.check("conv2d", weighted(c, [w, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv2d(x, w, b, 2, 1);
                }), in);
    sweep.check("conv2d", weighted(c, [in, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv2d(in, x, b, 2, 1);
                }), w);
    sweep.check("conv2d", weighted(c, [in, w](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv2d(in, w, x, 2, 1);
                }), b);
  }
  {
    Rng r = stream("conv_transpose2d");
    ad::Tensor in = rnd(r, {2, 3, 3}, -1, 1), w = rnd(r, {2, 3, 3, 3}, -0.5, 0.5);
    ad::Tensor b = rnd(r, {3}, -0.5, 0.5), c = rnd(r, {3, 5, 5}, -1, 1);
    sweep.check("conv_transpose2d", weighted(c, [w, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv_transpose2d(x, w, b, 2, 1);
                }), in);
    sweep.check("conv_transpose2d", weighted(c, [in, b](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv_transpose2d(in, x, b, 2, 1);
                }), w);
    sweep.check("conv_transpose2d", weighted(c, [in, w](ad::Tape&, const ad::Tensor& x) {
                  return ad::conv_transpose2d(in, w, x, 2, 1);
                }), b);
  }
}

}  // namespace

GradReport run_gradcheck(const cfg::RunConfig& config) {
  if (config.preset != "desk") {
    throw ValidationError("gradcheck requires the desk preset (finite differences over the full "
                          "pipeline are only budgeted at desk scale)");
  }
  GradReport report;
  const double eps = 1e-5;
  sweep_primitives(config.seed, report.entries);

  // ---- end-to-end: image -> prediction -> weighted total loss ----
  Pipeline p = build_pipeline(config);
  nn::ParamStore store;
  register_pipeline_params(store, p);
  // Nudge every parameter off its initialization so zero-initialized heads
  // and output projections don't make upstream gradients vacuously zero.
  for (auto& [name, t] : store.all()) {
    Rng r = named_rng(config.seed ^ 0x9e3779b97f4a7c15ull, "gc.param." + name);
    for (double& x : t.data) x += r.uniform(-0.1, 0.1);
  }

  const img::SyntheticSample sample =
      img::synthesize_sample(p.left_model, p.right_model, config.sample_seed, config.image_size);

  auto eval_total = [&](const ad::Tensor& image) {
    ad::Tape tape;
    nn::ParamBinder binder(tape, store);
    refine::Prediction pred = pipeline_forward(binder, p, image, sample.camera);
    auto inputs = loss_inputs(p, pred, sample);
    loss::LossTerms terms = loss::compute_losses(inputs.first, inputs.second, sample.camera);
    return loss::total_loss(terms, config.weights).data[0];
  };

  // One analytic backward pass serves every probe.
  std::map<std::string, ad::Tensor> analytic;
  ad::Tensor image_grad;
  {
    ad::Tape tape;
    nn::ParamBinder binder(tape, store);
    ad::Tensor image = tape.watch(sample.image);
    refine::Prediction pred = pipeline_forward(binder, p, image, sample.camera);
    auto inputs = loss_inputs(p, pred, sample);
    loss::LossTerms terms = loss::compute_losses(inputs.first, inputs.second, sample.camera);
    ad::Tensor total = loss::total_loss(terms, config.weights);
    tape.backward(total);
    analytic = binder.gradients();
    image_grad = tape.grad(image);
  }

  // Central-difference probe of sampled coordinates. The total is piecewise
  // smooth (L1 terms), so a probe whose +-eps window straddles a kink is
  // detected by comparing step sizes eps and eps/2 — away from kinks they
  // agree to O(eps^2), across one they differ grossly — and re-drawn.
  auto probe_coords = [&](const std::string& entry_name, std::vector<double>& data,
                          const double* grad, int grad_size,
                          const std::function<double()>& eval) {
    const int size = int(data.size());
    const int want = std::min(2, size);
    Rng pick = named_rng(config.seed, "gc.pick." + entry_name);
    std::set<int> used;
    double worst = 0.0;
    int found = 0;
    for (int attempt = 0; found < want && attempt < want + 8; ++attempt) {
      int idx = int(pick.raw() % std::uint64_t(size));
      if (!used.insert(idx).second) continue;
      const double orig = data[std::size_t(idx)];
      auto central = [&](double h) {
        data[std::size_t(idx)] = orig + h;
        double fp = eval();
        data[std::size_t(idx)] = orig - h;
        double fm = eval();
        data[std::size_t(idx)] = orig;
        return (fp - fm) / (2.0 * h);
      };
      const double numeric = central(eps);
      const double a = (grad != nullptr && idx < grad_size) ? grad[std::size_t(idx)] : 0.0;
      const double err = rel_err(a, numeric);
      if (err > report.tolerance) {
        const double half = central(eps / 2.0);
        if (rel_err(numeric, half) > 1e-4) continue;  // kink inside the window; re-draw
      }
      worst = std::max(worst, err);
      ++found;
    }
    report.entries.push_back({entry_name, worst});
  };

  for (auto& [name, t] : store.all()) {
    const ad::Tensor* g = analytic.count(name) ? &analytic.at(name) : nullptr;
    probe_coords("loss/" + name, t.data, g ? g->data.data() : nullptr, g ? g->size() : 0,
                 [&] { return eval_total(sample.image); });
  }
  {
    ad::Tensor image = sample.image;  // detached copy the probes may mutate
    probe_coords("loss/input.image", image.data, image_grad.data.data(), image_grad.size(),
                 [&] { return eval_total(image); });
  }
  return report;
}

// ---- infer ----

InferResult run_infer(const cfg::RunConfig& config) {
  Pipeline p = build_pipeline(config);
  nn::ParamStore store;
  register_pipeline_params(store, p);
  if (!config.checkpoint_path.empty()) {
    nn::apply_checkpoint(store, nn::load_checkpoint(config.checkpoint_path));
  }

  const img::SyntheticSample sample =
      img::synthesize_sample(p.left_model, p.right_model, config.sample_seed, config.image_size);

  InferResult result;
  result.prediction = forward_detached(p, store, sample);
  const refine::Prediction& pred = result.prediction;

  fs::create_directories(config.out_dir);
  result.left_direct_obj = join(config.out_dir, "left_direct.obj");
  result.right_direct_obj = join(config.out_dir, "right_direct.obj");
  result.left_mano_obj = join(config.out_dir, "left_mano.obj");
  result.right_mano_obj = join(config.out_dir, "right_mano.obj");
  result.params_json = join(config.out_dir, "params.json");

  io::write_obj(result.left_direct_obj, pred.vertices_left, p.left_model.faces);
  io::write_obj(result.right_direct_obj, pred.vertices_right, p.right_model.faces);

  const ad::Tensor zero3({3}, {0.0, 0.0, 0.0});
  ad::Tensor mano_left =
      hand::mano_forward(p.left_model, pred.theta_left, pred.beta_left, zero3).vertices;
  ad::Tensor mano_right =
      hand::mano_forward(p.right_model, pred.theta_right, pred.beta_right, zero3).vertices;
  io::write_obj(result.left_mano_obj, mano_left, p.left_model.faces);
  io::write_obj(result.right_mano_obj, mano_right, p.right_model.faces);

  json j;
  j["camera"] = {{"s", pred.camera.s}, {"tx", pred.camera.tx}, {"ty", pred.camera.ty}};
  j["left"] = {{"theta", pred.theta_left.data}, {"beta", pred.beta_left.data}};
  j["right"] = {{"theta", pred.theta_right.data}, {"beta", pred.beta_right.data}};
  std::ofstream out(result.params_json);
  if (!out) throw ValidationError("cannot write '" + result.params_json + "'");
  out << j.dump(2) << "\n";
  return result;
}

// ---- eval ----

namespace {

json section_json(const EvalSection& s) {
  json per = json::array();
  for (const auto& [seed, r] : s.per_sample) {
    per.push_back({{"seed", seed},
                   {"mpjpe_mm", r.mpjpe_mm},
                   {"mpvpe_mm", r.mpvpe_mm},
                   {"pck_auc", r.pck_auc},
                   {"proj2d_px", r.proj2d_px}});
  }
  return json{{"mpjpe_mm", s.mean.mpjpe_mm},
              {"mpvpe_mm", s.mean.mpvpe_mm},
              {"pck_auc", s.mean.pck_auc},
              {"proj2d_px", s.mean.proj2d_px},
              {"per_sample", per}};
}

void accumulate_mean(EvalSection& s) {
  if (s.per_sample.empty()) return;
  const double inv = 1.0 / double(s.per_sample.size());
  loss::MetricReport mean;
  for (const auto& [seed, r] : s.per_sample) {
    (void)seed;
    mean.mpjpe_mm += r.mpjpe_mm;
    mean.mpvpe_mm += r.mpvpe_mm;
    mean.pck_auc += r.pck_auc;
    mean.proj2d_px += r.proj2d_px;
  }
  mean.mpjpe_mm *= inv;
  mean.mpvpe_mm *= inv;
  mean.pck_auc *= inv;
  mean.proj2d_px *= inv;
  s.mean = mean;
}

}  // namespace

EvalResult run_eval(const cfg::RunConfig& config) {
  if (config.manifest_path.empty()) {
    throw ValidationError("eval requires a dataset manifest (set manifest_path)");
  }
  Pipeline p = build_pipeline(config);
  nn::ParamStore store;
  register_pipeline_params(store, p);
  if (!config.checkpoint_path.empty()) {
    nn::apply_checkpoint(store, nn::load_checkpoint(config.checkpoint_path));
  }

  EvalResult result;
  std::vector<img::SyntheticSample> samples = img::load_manifest(
      config.manifest_path, p.left_model, p.right_model, config.image_size, &result.skipped_lines);
  if (samples.empty()) {
    throw ValidationError("manifest '" + config.manifest_path + "' holds no usable samples");
  }

  const ad::Tensor zero3({3}, {0.0, 0.0, 0.0});
  for (const img::SyntheticSample& sample : samples) {
    refine::Prediction pred = forward_detached(p, store, sample);

    loss::HandMeshPair dl{pred.vertices_left, sample.left.vertices, &p.left_model};
    loss::HandMeshPair dr{pred.vertices_right, sample.right.vertices, &p.right_model};
    result.direct.per_sample.push_back({sample.seed, loss::metrics(dl, dr, sample.camera)});

    // The parametric branch predicts no translation; root alignment inside
    // the 3D metrics absorbs that, the pixel metric reports it as-is.
    ad::Tensor mano_left =
        hand::mano_forward(p.left_model, pred.theta_left, pred.beta_left, zero3).vertices;
    ad::Tensor mano_right =
        hand::mano_forward(p.right_model, pred.theta_right, pred.beta_right, zero3).vertices;
    loss::HandMeshPair ml{mano_left, sample.left.vertices, &p.left_model};
    loss::HandMeshPair mr{mano_right, sample.right.vertices, &p.right_model};
    result.mano.per_sample.push_back({sample.seed, loss::metrics(ml, mr, sample.camera)});
  }
  accumulate_mean(result.direct);
  accumulate_mean(result.mano);

  fs::create_directories(config.out_dir);
  result.json_path = join(config.out_dir, "metrics.json");
  json root = {{"direct", section_json(result.direct)},
               {"mano", section_json(result.mano)},
               {"sample_count", int(samples.size())},
               {"skipped_lines", result.skipped_lines}};
  std::ofstream out(result.json_path);
  if (!out) throw ValidationError("cannot write '" + result.json_path + "'");
  out << root.dump(2) << "\n";
  return result;
}

}  // namespace handrec::run
