#pragma once

#include "cmdm/nn/types.hpp"

namespace cmdm::nn {

struct AdamWConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam. Moments are created lazily per path.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamTree& params, const ParamTree& grads, Real lr);
  long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  ParamTree m_, v_;
  long t_ = 0;
};

/// Rescales grads in place so their global L2 norm is at most max_norm. Returns the pre-clip norm.
Real clip_grad_norm(ParamTree& grads, Real max_norm);

/// Linear warmup then cosine decay from base_lr to 0 over total_steps.
Real cosine_lr(long step, long total_steps, Real base_lr, long warmup_steps = 0);

}  // namespace cmdm::nn
