#pragma once

// Run configuration: one JSON document with sections data, vae, dit,
// diffusion, sampler, train, eval and a global seed. Every field has a
// default; unknown keys are rejected.

#include "cmdm/align/align.hpp"
#include "cmdm/data/toy_motion.hpp"
#include "cmdm/diffusion/schedule.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/vae/mac_vae.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cmdm::io {

struct DataSection {
  int samples_per_caption = 64;
  int frames = 64;
  double fps = 20.0;
  double noise_std = 0.01;
  std::uint64_t seed = 7;

  bool operator==(const DataSection&) const = default;
};

struct VaeSection {
  int channels = 64;
  int latent_dim = 16;
  double beta = 0.001;
  double m1 = 0.5;
  double m2 = 0.25;
  double lambda_max = 10.0;
  double lambda_eps = 1e-8;
  int feature_dim = 32;
  bool mdms_projected = false;
  std::uint64_t oracle_seed = 11;

  bool operator==(const VaeSection&) const = default;
};

struct DitSection {
  int layers = 4;
  int heads = 4;
  int hidden = 128;
  int mlp_ratio = 2;

  bool operator==(const DitSection&) const = default;
};

struct DiffusionSection {
  int K = 1000;
  std::string schedule = "linear";
  double drop_prob = 0.1;

  bool operator==(const DiffusionSection&) const = default;
};

struct SamplerSection {
  std::string mode = "fss";
  int K = 50;
  int L = 2;
  double guidance = 3.0;
  int horizon = 0;

  bool operator==(const SamplerSection&) const = default;
};

struct TrainSection {
  int vae_steps = 3000;
  int vae_batch = 16;
  double vae_lr = 1e-3;
  int dit_steps = 4000;
  int dit_batch = 32;
  double dit_lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int warmup = 100;
  int log_every = 100;

  bool operator==(const TrainSection&) const = default;
};

struct EvalSection {
  int n_per_caption = 16;
  int long_frames = 32;    // latent frames of a two-caption generation
  int switch_at = 16;      // latent frame where the second caption starts
  int jerk_window = 16;    // motion frames around the transition
  int transitions = 50;
  int horizon = 16;        // self-attention window for long generations
  int threads = 1;

  bool operator==(const EvalSection&) const = default;
};

struct RunConfig {
  DataSection data;
  VaeSection vae;
  DitSection dit;
  DiffusionSection diffusion;
  SamplerSection sampler;
  TrainSection train;
  EvalSection eval;
  std::uint64_t seed = 0;

  /// Range checks; throws ConfigError naming the key.
  void validate() const;

  data::DatasetSpec dataset_spec() const;
  vae::VaeConfig vae_config() const;
  align::AlignConfig align_config() const;
  dit::DitConfig dit_config() const;
  diffusion::DiffusionSchedule train_schedule() const;
  diffusion::DiffusionSchedule inference_schedule() const;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep defaults; unknown keys and mistyped values throw ConfigError naming the key.
RunConfig from_json(const nlohmann::json& j);

/// Applies "section.key=value" overrides; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Directory searched for relative config names; CMDM_CONFIG_DIR or "configs".
std::filesystem::path default_config_dir();

/// FNV-1a over the serialized sections that shape the VAE weights.
std::uint64_t vae_hash(const RunConfig& cfg);
/// FNV-1a over everything that shapes the denoiser weights (includes the VAE).
std::uint64_t dit_hash(const RunConfig& cfg);

}  // namespace cmdm::io
