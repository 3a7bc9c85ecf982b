#include "cmdm/nn/optim.hpp"

#include "cmdm/errors.hpp"

#include <cmath>
#include <algorithm>
#include <numbers>

namespace cmdm::nn {

void AdamW::step(ParamTree& params, const ParamTree& grads, Real lr) {
  ++t_;
  const Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(t_));
  const Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(t_));
  for (const auto& [path, g] : grads) {
    Mat& p = params.at(path);
    if (!m_.contains(path)) {
      m_.set(path, Mat::Zero(p.rows(), p.cols()));
      v_.set(path, Mat::Zero(p.rows(), p.cols()));
    }
    Mat& m = m_.at(path);
    Mat& v = v_.at(path);
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    if (cfg_.weight_decay > 0) p *= (1.0 - lr * cfg_.weight_decay);
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

Real clip_grad_norm(ParamTree& grads, Real max_norm) {
  const Real norm = std::sqrt(grads.squared_norm());
  if (!std::isfinite(norm)) throw NumericalError("clip_grad_norm: non-finite gradient norm");
  if (max_norm > 0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

Real cosine_lr(long step, long total_steps, Real base_lr, long warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<Real>(step + 1) / static_cast<Real>(warmup_steps);
  }
  const long span = std::max(1L, total_steps - warmup_steps);
  const Real progress = std::min<Real>(1.0, static_cast<Real>(step - warmup_steps) / static_cast<Real>(span));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cmdm::nn
