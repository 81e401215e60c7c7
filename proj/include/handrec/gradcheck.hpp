#pragma once

#include <functional>
#include <string>

#include "handrec/tensor.hpp"

namespace handrec::ad {

// Scalar-valued function of one tensor. The tape argument is live for the
// analytic pass; numeric probes pass a throwaway tape the function may ignore.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckDetail {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences against the tape gradient. Relative error uses
// |a - n| / max(|a|, |n|, 1e-8), maximized over coordinates of x.
// contract: eps in [1e-7, 1e-3]; f(x) is scalar.
double grad_check(const ScalarFn& f, const Tensor& x, double eps);
GradCheckDetail grad_check_detail(const ScalarFn& f, const Tensor& x, double eps);

}  // namespace handrec::ad
