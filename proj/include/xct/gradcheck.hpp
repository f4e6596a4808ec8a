#pragma once

#include <functional>
#include <vector>

#include "xct/tensor.hpp"

namespace xct::diff {

struct GradCheckInput {
  Shape shape;
  std::vector<double> values;
};

struct GradCheckReport {
  std::vector<double> max_rel_err;  // per input
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a scalar-valued f against central finite
// differences. Relative error uses a unit floor: |a-n| / max(|a|,|n|,1).
// Report-only: a failing check is returned, not thrown.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<GradCheckInput>& inputs,
                           double epsilon = 1e-5, double tolerance = 1e-4);

}  // namespace xct::diff
