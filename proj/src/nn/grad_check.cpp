#include "cmdm/nn/grad_check.hpp"

#include "cmdm/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cmdm::nn {

namespace {

Real evaluate(const LossFn& loss, const ParamTree& params, const std::string& where) {
  Tape tape;
  const Real v = loss(tape, params).scalar();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss " + where);
  return v;
}

}  // namespace

GradCheckReport grad_check_report(const LossFn& loss, const ParamTree& params, Real eps,
                                  std::size_t max_per_param) {
  if (!(eps > 0) || eps > 1e-2) throw ConfigError("grad_check: eps must lie in (0, 1e-2]");
  const Real base = evaluate(loss, params, "at unperturbed parameters");
  // Central differences carry roundoff of about eps_mach * |loss| / eps; exactly-zero gradients
  // (e.g. attention key biases) would otherwise read as large relative errors.
  const Real floor = 1e-5 * std::max<Real>(1.0, std::abs(base));

  Tape tape;
  Var root = loss(tape, params);
  tape.backward(root);
  const ParamTree analytic = tape.param_grads();

  GradCheckReport report;
  ParamTree work = params;
  for (auto& [path, value] : work) {
    const Mat grad = analytic.contains(path) ? analytic.at(path) : Mat::Zero(value.rows(), value.cols());
    const Eigen::Index n = value.size();
    const Eigen::Index stride =
        max_per_param == 0 ? 1 : std::max<Eigen::Index>(1, n / static_cast<Eigen::Index>(max_per_param));
    for (Eigen::Index i = 0; i < n; i += stride) {
      Real& slot = value.data()[i];
      const Real saved = slot;
      slot = saved + eps;
      const Real up = evaluate(loss, work, "after perturbing '" + path + "'");
      slot = saved - eps;
      const Real down = evaluate(loss, work, "after perturbing '" + path + "'");
      slot = saved;
      const Real numeric = (up - down) / (2 * eps);
      const Real a = grad.data()[i];
      const Real denom = std::max({std::abs(a), std::abs(numeric), floor});
      const Real rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (report.checked == 1 || rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_path = path;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

Real grad_check(const LossFn& loss, const ParamTree& params, Real eps) {
  return grad_check_report(loss, params, eps).max_rel_err;
}

}  // namespace cmdm::nn
