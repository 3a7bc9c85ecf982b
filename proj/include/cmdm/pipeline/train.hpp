#pragma once

// Training loops for the VAE (with alignment) and the denoiser, plus the
// checkpoint and dataset files the command line reads and writes.

#include "cmdm/data/toy_motion.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/io/config.hpp"
#include "cmdm/sampler/sampler.hpp"
#include "cmdm/vae/mac_vae.hpp"

#include <filesystem>
#include <functional>
#include <vector>

namespace cmdm::pipeline {

using nn::Mat;
using nn::Real;

struct TrainLog {
  long step = 0;
  Real loss = 0;
  Real rec = 0;
  Real kl = 0;
  Real align = 0;
  Real lambda = 0;
  Real lr = 0;
  Real grad_norm = 0;
};

using LogFn = std::function<void(const TrainLog&)>;

struct DitModel {
  dit::DitConfig config;
  nn::ParamTree params;
  sampler::LatentNorm norm;
};

/// Fresh VAE parameters plus the alignment projection "align.w" (d_f x d_z).
vae::VaeModel init_vae_model(const io::RunConfig& cfg);

void train_vae(vae::VaeModel& model, const io::RunConfig& cfg, const std::vector<data::Sample>& data,
               const LogFn& log = {});

/// Mean over samples of the element-mean squared error of decode(mu(x)).
Real reconstruction_mse(const vae::VaeModel& model, const std::vector<data::Sample>& data);

/// Posterior means of every sample, stacked (N U x d_z).
Mat encode_means(const vae::VaeModel& model, const std::vector<data::Sample>& data);

DitModel init_dit_model(const io::RunConfig& cfg, const vae::VaeModel& vae);

void train_dit(DitModel& model, const io::RunConfig& cfg, const vae::VaeModel& vae,
               const std::vector<data::Sample>& data, const LogFn& log = {});

void save_vae(const std::filesystem::path& path, const vae::VaeModel& model, const io::RunConfig& cfg);
/// Throws InputError if the file is missing, ConfigError if it was trained under a different config.
vae::VaeModel load_vae(const std::filesystem::path& path, const io::RunConfig& cfg);

void save_dit(const std::filesystem::path& path, const DitModel& model, const io::RunConfig& cfg);
DitModel load_dit(const std::filesystem::path& path, const io::RunConfig& cfg);

/// Tensor container with "sample.<i>.tokens" and "sample.<i>.motion", plus a JSON manifest beside it.
void save_dataset(const std::filesystem::path& path, const std::vector<data::Sample>& data,
                  const data::DatasetSpec& spec);
std::vector<data::Sample> load_dataset(const std::filesystem::path& path, double fps);

}  // namespace cmdm::pipeline
