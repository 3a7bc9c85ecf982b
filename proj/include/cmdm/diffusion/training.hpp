#pragma once

// Diffusion-forcing objective: every frame gets its own noise level.

#include "cmdm/diffusion/schedule.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/motion.hpp"
#include "cmdm/nn/tape.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace cmdm::diffusion {

using nn::Tape;
using nn::Var;

/// Noised batch ready for the denoiser. Sequences of seq_len frames are stacked along rows.
struct DfBatch {
  Mat z_tilde;
  Mat eps;
  std::vector<int> levels;       // schedule levels, 0..K
  std::vector<int> train_levels;  // the same levels as training-step indices
  std::vector<TextCondition> conds;  // after condition dropout
  int seq_len = 0;
};

struct DfOptions {
  Real drop_prob = 0.1;
  // When set every frame of every sequence uses this level (the full-sequence objective).
  std::optional<int> fixed_level;
  // When true, one level per sequence shared by all its frames.
  bool shared_level = false;
};

/// Samples k_t ~ U{0..K} per frame from the level stream, noises each frame,
/// and replaces a sequence's caption with null_cond with probability drop_prob.
/// Sequence b draws from rng.derive(b).
DfBatch df_prepare(const Mat& z_batch, std::span<const TextCondition> conds, int seq_len, const DiffusionSchedule& s,
                   const RngKey& rng, const TextCondition& null_cond, const DfOptions& opt = {});

using Predictor = std::function<Var(Tape&, const DfBatch&)>;

/// Mean squared residual between predicted and drawn noise.
Var df_training_loss(Tape& tape, const Predictor& model, const DfBatch& batch);

/// Predictor backed by the causal transformer.
Predictor dit_predictor(const nn::ParamTree& params, const dit::DitConfig& cfg);

}  // namespace cmdm::diffusion
