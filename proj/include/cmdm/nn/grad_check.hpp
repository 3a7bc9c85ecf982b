#pragma once

#include "cmdm/nn/tape.hpp"

#include <functional>
#include <string>

namespace cmdm::nn {

/// Builds a scalar loss on the given tape from the given parameters.
using LossFn = std::function<Var(Tape&, const ParamTree&)>;

struct GradCheckReport {
  Real max_rel_err = 0;
  std::string worst_path;
  Eigen::Index worst_index = -1;
  Real analytic = 0;
  Real numeric = 0;
  std::size_t checked = 0;
};

/// Compares tape gradients with central finite differences, element by element.
/// Relative error per element is |a - n| / max(|a|, |n|, 1e-5 * max(1, |loss|)).
/// max_per_param > 0 checks only that many evenly strided elements of each array.
GradCheckReport grad_check_report(const LossFn& loss, const ParamTree& params, Real eps,
                                  std::size_t max_per_param = 0);

Real grad_check(const LossFn& loss, const ParamTree& params, Real eps);

}  // namespace cmdm::nn
