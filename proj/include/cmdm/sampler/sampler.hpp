#pragma once

// Autoregressive and frame-wise-schedule samplers over latent frames.
//
// Both drive the same row update: one batched causal forward over a window of
// frames, then an ancestral step for every frame whose level drops in that
// row. Frames that reached level 0 are committed to the key/value cache the
// next time they appear at the front of a window.

#include "cmdm/diffusion/schedule.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/motion.hpp"
#include "cmdm/vae/mac_vae.hpp"

#include <span>
#include <string>
#include <vector>

namespace cmdm::sampler {

using nn::Mat;
using nn::Real;

/// levels(m, t) = clamp(K - m + t L, 0, K) with 0-based m and t; M = K + (T-1) L + 1 rows.
struct ScheduleMatrix {
  int K = 0;
  int L = 0;
  int T = 0;
  int M = 0;
  std::vector<int> levels;  // row-major M x T

  int at(int m, int t) const { return levels[static_cast<std::size_t>(m) * static_cast<std::size_t>(T) + t]; }
  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

/// Throws ConfigError unless K >= 1, 1 <= L <= K and T >= 1.
ScheduleMatrix build_fss_matrix(int K, int L, int T);

/// Per-dimension standardisation between VAE latents and denoiser latents.
struct LatentNorm {
  Mat mean;  // 1 x d_z; empty means 0
  Mat std;   // 1 x d_z; empty means 1

  Mat to_model(const Mat& z) const;
  Mat to_vae(const Mat& z) const;
  /// Throws ConfigError on a width mismatch or a non-positive std.
  void validate(int latent_dim) const;
  /// Column means and standard deviations of the rows of z.
  static LatentNorm fit(const Mat& z);
};

/// Everything a sampler needs besides the caption track and the seed.
struct Generator {
  const nn::ParamTree* dit_params = nullptr;
  dit::DitConfig dit_config;
  diffusion::DiffusionSchedule schedule;  // inference schedule; levels 0..K
  Real guidance = 3.0;
  int horizon = 0;            // self-attention window in latent frames; 0 = full prefix
  LatentNorm norm;            // DiT latents are standardised VAE latents
  const vae::VaeModel* vae = nullptr;  // optional; decodes motion when set
  double fps = 20.0;
};

struct SampleOptions {
  // Replaces the init-stream draws when non-empty (T x d_z).
  Mat init_noise;
};

struct GenerationReport {
  MotionSequence motion;  // streamed output, 4 frames per latent frame; empty without a VAE
  Mat latents;            // final latents in VAE units, T x d_z
  long model_calls = 0;   // batched forwards; a guided pair counts once
  std::vector<long> per_frame_calls;  // forwards between consecutive frame completions
  std::vector<int> completion_row;    // forward index after which each frame reached level 0
  double wall_time = 0;
};

/// Caption per latent frame: captions[i] is active from switch_at[i-1] on.
std::vector<TextCondition> caption_track(std::span<const TextCondition> captions, std::span<const int> switch_at,
                                         int T);

GenerationReport ar_generate(const Generator& gen, int T, std::span<const TextCondition> frame_conds,
                             const RngKey& rng, const SampleOptions& opt = {});

GenerationReport fss_generate(const Generator& gen, const ScheduleMatrix& matrix,
                              std::span<const TextCondition> frame_conds, const RngKey& rng,
                              const SampleOptions& opt = {});

/// Unbatched, uncached oracle for fss_generate: every (row, frame) update
/// recomputes the model on frames 0..t of the row-start snapshot. Returns latents.
Mat fss_reference(const Generator& gen, const ScheduleMatrix& matrix, std::span<const TextCondition> frame_conds,
                  const RngKey& rng, const SampleOptions& opt = {});

}  // namespace cmdm::sampler
