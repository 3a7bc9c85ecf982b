#pragma once

// Desk-scale evaluation of trained checkpoints: reconstruction, caption
// consistency for both samplers, and transition smoothness of two-caption
// generations against a hard-concatenation baseline.

#include "cmdm/metrics/metrics.hpp"
#include "cmdm/pipeline/train.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace cmdm::pipeline {

/// Generator for the trained pair; horizon and guidance come from cfg.sampler.
sampler::Generator make_generator(const io::RunConfig& cfg, const DitModel& dit, const vae::VaeModel& vae);

struct TransitionSample {
  int first = 0;  // caption indices
  int second = 0;
  metrics::TransitionEval ar;
  metrics::TransitionEval fss;
  metrics::TransitionEval baseline;
};

struct EvalReport {
  Real recon_mse = 0;
  Real recon_mpjpe = 0;
  metrics::ConsistencyResult consistency_ar;
  metrics::ConsistencyResult consistency_fss;
  std::vector<TransitionSample> transitions;
  Real median_auj_ar = 0;
  Real median_auj_fss = 0;
  Real median_auj_baseline = 0;
  double seconds = 0;
};

struct EvalOptions {
  bool consistency = true;
  bool transitions = true;
  int threads = 1;
};

EvalReport evaluate(const io::RunConfig& cfg, const vae::VaeModel& vae, const DitModel& dit,
                    const std::vector<data::Sample>& data, const EvalOptions& opt);

/// Long two-caption generation: long_frames latent frames, caption switch at
/// switch_at, self-attention limited to eval.horizon.
sampler::GenerationReport generate_transition(const io::RunConfig& cfg, const sampler::Generator& gen,
                                              const data::ToyCaption& first, const data::ToyCaption& second,
                                              const std::string& mode, const RngKey& key);

nlohmann::json to_json(const EvalReport& r);
/// One row per generated sample: kind, index, captions, prediction or PJ/AUJ.
std::string to_csv(const EvalReport& r);

Real median(std::vector<Real> v);

}  // namespace cmdm::pipeline
