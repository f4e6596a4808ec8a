#include "xct/gradcheck.hpp"

#include <cmath>

namespace xct::diff {

GradCheckReport grad_check(const ScalarFn& f, const std::vector<GradCheckInput>& inputs,
                           double epsilon, double tolerance) {
  if (epsilon < 1e-7 || epsilon > 1e-3) {
    throw ConfigError("grad_check: epsilon must lie in [1e-7, 1e-3]");
  }

  // reverse-mode gradients
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> ts;
    ts.reserve(inputs.size());
    for (const auto& in : inputs) ts.push_back(tape.leaf(in.shape, in.values, true));
    Tensor y = f(tape, ts);
    if (y.size() != 1) throw ConfigError("grad_check: f must be scalar-valued");
    tape.backward(y);
    for (const auto& t : ts) analytic.push_back(t.grad());
  }

  auto eval_at = [&](const std::vector<GradCheckInput>& pts) {
    Tape tape;
    std::vector<Tensor> ts;
    for (const auto& in : pts) ts.push_back(tape.leaf(in.shape, in.values, false));
    return f(tape, ts).item();
  };

  GradCheckReport rep;
  rep.tolerance = tolerance;
  std::vector<GradCheckInput> pts = inputs;
  for (size_t i = 0; i < inputs.size(); ++i) {
    double worst = 0.0;
    for (size_t j = 0; j < inputs[i].values.size(); ++j) {
      const double orig = pts[i].values[j];
      pts[i].values[j] = orig + epsilon;
      const double fp = eval_at(pts);
      pts[i].values[j] = orig - epsilon;
      const double fm = eval_at(pts);
      pts[i].values[j] = orig;
      const double num = (fp - fm) / (2.0 * epsilon);
      const double ana = analytic[i][j];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1.0});
      worst = std::max(worst, rel);
    }
    rep.max_rel_err.push_back(worst);
    rep.worst = std::max(rep.worst, worst);
  }
  rep.pass = rep.worst < tolerance;
  return rep;
}

}  // namespace xct::diff
