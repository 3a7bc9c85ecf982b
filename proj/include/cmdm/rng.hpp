#pragma once

// Counter-based random draws. Every draw is a pure function of
// (seed, kind, frame, step, element index), so two samplers that visit frames
// in different orders still consume identical noise.

#include "cmdm/nn/types.hpp"

#include <cstdint>
#include <string_view>

namespace cmdm {

enum class DrawKind : std::uint8_t {
  init = 1,       // initial latent noise per frame
  ancestral = 2,  // per-step noise injection in the reverse update
  reparam = 3,    // VAE reparameterisation noise
  drop = 4,       // condition dropout coin
  level = 5,      // training noise levels
  diffuse = 6,    // forward-diffusion noise
  weights = 7,    // parameter initialisation
  data = 8,       // dataset jitter and placement
  probe = 9,      // causality probe perturbations
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(std::string_view s);

struct RngKey {
  std::uint64_t seed = 0;

  /// Child key for an independent sub-stream (e.g. one per training sample).
  RngKey derive(std::uint64_t label) const { return RngKey{hash_combine(seed, label)}; }

  /// Uniform in (0, 1).
  double uniform(DrawKind kind, std::int64_t frame, std::int64_t step, std::uint64_t index = 0) const;
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(DrawKind kind, std::int64_t frame, std::int64_t step, std::int64_t lo,
                           std::int64_t hi) const;
  /// rows x cols standard normal draws (Box-Muller over consecutive counters).
  nn::Mat normal(DrawKind kind, std::int64_t frame, std::int64_t step, Eigen::Index rows,
                 Eigen::Index cols) const;

 private:
  std::uint64_t stream(DrawKind kind, std::int64_t frame, std::int64_t step) const;
};

}  // namespace cmdm
