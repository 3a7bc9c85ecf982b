#pragma once

// Discrete noise schedules, per-frame forward noising, the ancestral reverse
// update and classifier-free guidance.

#include "cmdm/nn/types.hpp"
#include "cmdm/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace cmdm::diffusion {

using nn::Mat;
using nn::Real;

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind kind);

inline constexpr Real kBetaStart = 1e-4;
inline constexpr Real kBetaEnd = 2e-2;

/// Levels run 0..K. Index 0 of alpha and sigma is unused (stored as 1 and 0)
/// so that alpha(k) reads naturally for k in 1..K.
struct DiffusionSchedule {
  int K = 0;
  std::vector<Real> alpha;      // K + 1
  std::vector<Real> alpha_bar;  // K + 1, alpha_bar[0] = 1
  std::vector<Real> sigma;      // K + 1, sigma[1] = 0
  // Training-step index each level corresponds to; identity unless subsampled.
  std::vector<int> train_index;

  /// Throws ConfigError when any schedule invariant fails.
  void validate() const;
};

/// Throws ConfigError if K < 1.
DiffusionSchedule build_schedule(int K, ScheduleKind kind);

/// Keeps levels round(j K / K_infer) for j = 0..K_infer and recomputes alpha
/// from consecutive retained alpha_bar values; train_index maps back.
DiffusionSchedule subsample_schedule(const DiffusionSchedule& s, int K_infer);

struct Diffused {
  Mat z_tilde;
  Mat eps;
};

/// Row t is noised to level k[t]; its noise comes from the (t, k[t]) diffuse stream.
Diffused forward_diffuse(const Mat& z, std::span<const int> levels, const DiffusionSchedule& s, const RngKey& rng);

/// One ancestral update of a single frame (1 x d) from level k to k-1. The
/// injected noise is drawn from the (frame, k) ancestral stream.
Mat reverse_step(const Mat& z_k, const Mat& eps_hat, int k, const DiffusionSchedule& s, const RngKey& rng, int frame);

/// Same update with an explicit noise draw w.
Mat reverse_step_with(const Mat& z_k, const Mat& eps_hat, int k, const DiffusionSchedule& s, const Mat& w);

/// eps_uncond + scale (eps_cond - eps_uncond).
Mat cfg_combine(const Mat& eps_cond, const Mat& eps_uncond, Real scale);

}  // namespace cmdm::diffusion
