#pragma once

// Motion-semantic alignment: cosine margin loss on projected latents, distance
// matrix margin loss on raw latents, and the gradient-norm weight balancing
// them against reconstruction.

#include "cmdm/data/toy_motion.hpp"
#include "cmdm/motion.hpp"
#include "cmdm/nn/tape.hpp"

#include <cstdint>

namespace cmdm::align {

using nn::Mat;
using nn::Real;
using nn::Var;

struct AlignConfig {
  Real m1 = 0.5;
  Real m2 = 0.25;
  Real lambda_max = 10.0;
  Real eps = 1e-8;
  int feature_dim = 32;
  // Run mdms on W z instead of z.
  bool mdms_projected = false;

  void validate() const;
};

/// Zp = Z W^T, one projected row per latent step. W is d_f x d_z.
Mat project_latents(const Mat& z, const Mat& w);

/// Mean over rows of relu(1 - m1 - cos(zp_i, f_i)). Zero rows throw NumericalError naming the row.
Real mcos_loss(const Mat& zp, const Mat& f, Real m1);

/// Mean over all ordered pairs (i, j) of relu(|cos(z_i, z_j) - cos(f_i, f_j)| - m2).
Real mdms_loss(const Mat& z, const Mat& f, Real m2);

Var project_latents(Var z, Var w);
Var mcos_loss(Var zp, const Mat& f, Real m1);
Var mdms_loss(Var z, const Mat& f, Real m2);

/// min(lambda_max, rec / (align + eps)).
Real adaptive_lambda(Real grad_rec_norm, Real grad_align_norm, const AlignConfig& cfg);

/// Stand-in for a pretrained motion-language encoder. Per 4-frame window:
/// [mean position, mean velocity, mean speed, 1] concatenated with a fixed
/// random embedding of each caption token, then a fixed random linear map to
/// feature_dim. Short inputs are left-padded like the VAE pads them.
Mat semantic_oracle(const MotionSequence& x, const TextCondition& caption, std::uint64_t seed, int feature_dim);

}  // namespace cmdm::align
