#include "handrec/gradcheck.hpp"

#include <cmath>

namespace handrec::ad {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape probe;
  Tensor y = f(probe, x);
  if (y.size() != 1) throw ContractError("grad_check: function output is not scalar");
  return y.data[0];
}

}  // namespace

GradCheckDetail grad_check_detail(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
  }
  Tape tape;
  Tensor leaf = tape.watch(x);
  Tensor y = f(tape, leaf);
  if (y.size() != 1) throw ContractError("grad_check: function output is not scalar");
  if (y.tape != &tape) throw ContractError("grad_check: function output is not on the given tape");
  tape.backward(y);
  Tensor analytic = tape.grad(leaf);

  GradCheckDetail detail;
  for (int i = 0; i < x.size(); ++i) {
    Tensor xp = x.detached();
    Tensor xm = x.detached();
    xp.data[size_t(i)] += eps;
    xm.data[size_t(i)] -= eps;
    double numeric = (eval_scalar(f, xp) - eval_scalar(f, xm)) / (2.0 * eps);
    double a = analytic[i];
    double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    if (rel >= detail.max_rel_err) {
      detail.max_rel_err = rel;
      detail.worst_index = i;
      detail.analytic = a;
      detail.numeric = numeric;
    }
  }
  return detail;
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  return grad_check_detail(f, x, eps).max_rel_err;
}

}  // namespace handrec::ad
