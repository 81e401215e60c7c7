#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "handrec/config.hpp"
#include "handrec/hand_model.hpp"
#include "handrec/hierarchy.hpp"
#include "handrec/image_encoder.hpp"
#include "handrec/losses.hpp"
#include "handrec/mmib.hpp"
#include "handrec/params.hpp"
#include "handrec/refine.hpp"

namespace handrec::run {

// Adam with bias correction. State is keyed by parameter name, so the update
// order (map order) and the result are deterministic.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update to every parameter named in `grads`.
  // contract: each named parameter exists and matches its gradient's size.
  void step(nn::ParamStore& store, const std::map<std::string, ad::Tensor>& grads);

  long step_count() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Everything derived from a RunConfig that the commands share: the two hand
// models (right + mirrored left), the mesh hierarchy, and the stage configs.
struct Pipeline {
  cfg::RunConfig config;
  hand::HandModel right_model;
  hand::HandModel left_model;
  hier::MeshHierarchy hierarchy;
  img::EncoderConfig encoder;
  mmib::StackConfig stack;
  refine::RefineConfig refiner;
};

Pipeline build_pipeline(const cfg::RunConfig& config);

// Registers encoder, coarse-to-fine stack, and refinement parameters, all
// seeded from config.seed.
void register_pipeline_params(nn::ParamStore& store, const Pipeline& p);

// Image -> feature pyramid -> token stack -> mesh-aligned refinement.
refine::Prediction pipeline_forward(nn::ParamBinder& params, const Pipeline& p,
                                    const ad::Tensor& image, const cam::Camera& camera);

// Pairs a prediction with one sample's ground truth (per hand, left then
// right). Ground-truth meshes are in the translated camera frame.
std::pair<loss::HandLossInputs, loss::HandLossInputs> loss_inputs(
    const Pipeline& p, const refine::Prediction& pred, const img::SyntheticSample& sample);

// ---- train-overfit ----

struct TrainResult {
  std::vector<loss::LossReport> curve;  // one entry per step, pre-update loss
  int steps_completed = 0;
  bool aborted = false;          // a loss term went non-finite
  std::string abort_reason;
  double final_total = 0.0;      // post-training loss over the training set
  std::string checkpoint_file;
  std::string curve_file;
  std::string manifest_file;     // the training set, re-loadable by eval
};

// Full-batch Adam descent on the weighted total loss over a fixed synthetic
// set (from the manifest when configured, else seeds derived from
// config.seed). Writes the loss-curve CSV (header
// step,L_V,L_J,L_N,L_E,L_P,L_Vmano,L_consist,total) and a checkpoint; a
// non-finite loss aborts, saving the last parameters that evaluated finite.
TrainResult train_overfit(const cfg::RunConfig& config);

// ---- gradcheck ----

struct GradReport {
  std::vector<std::pair<std::string, double>> entries;  // check name -> max rel err
  double tolerance = 1e-5;

  bool ok() const {
    for (const auto& e : entries)
      if (!(e.second <= tolerance)) return false;
    return true;
  }
};

// Central-difference audit (eps 1e-5): every tensor primitive on small random
// inputs, then the full image-to-loss pipeline — analytic parameter gradients
// against probes of sampled coordinates in every parameter tensor and the
// input image. Requires the desk preset so the sweep stays under the time
// budget.
GradReport run_gradcheck(const cfg::RunConfig& config);

// ---- infer ----

struct InferResult {
  refine::Prediction prediction;
  std::string left_direct_obj, right_direct_obj;  // non-parametric mesh V
  std::string left_mano_obj, right_mano_obj;      // parametric mesh MANO(theta, beta)
  std::string params_json;                        // theta, beta, camera
};

// One forward pass on the sample synthesized from config.sample_seed, with
// weights from config.checkpoint_path when set (fresh initialization
// otherwise). Writes the four OBJ meshes and the parameter JSON to
// config.out_dir.
InferResult run_infer(const cfg::RunConfig& config);

// ---- eval ----

struct EvalSection {
  loss::MetricReport mean;
  std::vector<std::pair<std::uint64_t, loss::MetricReport>> per_sample;  // (seed, report)
};

struct EvalResult {
  EvalSection direct;  // metrics of the predicted mesh V
  EvalSection mano;    // metrics of the parametric mesh MANO(theta, beta)
  int skipped_lines = 0;
  std::string json_path;
};

// Metrics over every manifest sample for both mesh representations, written
// to out_dir/metrics.json (schema in docs/metric_report.schema.json).
// contract: config.manifest_path set and the manifest non-empty.
EvalResult run_eval(const cfg::RunConfig& config);

}  // namespace handrec::run
