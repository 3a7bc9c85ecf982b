#pragma once

// Causal convolutional VAE with 4x temporal downsampling.
//
// Each side has seven plain kernel-3 (or 1x1) convolutions and two residual
// blocks. All convolutions are left padded, so latent step u sees input
// frames < 4(u+1) and output frame t sees latent steps <= t/4.

#include "cmdm/motion.hpp"
#include "cmdm/nn/tape.hpp"
#include "cmdm/nn/types.hpp"
#include "cmdm/rng.hpp"

#include <string>

namespace cmdm::vae {

using nn::Mat;
using nn::ParamTree;
using nn::Real;
using nn::Tape;
using nn::Var;

inline constexpr int kDownsample = 4;
inline constexpr Real kLogvarMin = -30.0;
inline constexpr Real kLogvarMax = 20.0;

struct VaeConfig {
  int input_dim = 4;
  int channels = 64;
  int latent_dim = 16;
  Real beta = 1.0;

  void validate() const;
};

struct VaeModel {
  VaeConfig config;
  ParamTree params;  // "enc.*" and "dec.*"
};

ParamTree init_vae(const VaeConfig& cfg, const RngKey& key);

struct LatentDistribution {
  Mat mu;      // U x d_z
  Mat logvar;  // U x d_z, clamped to [kLogvarMin, kLogvarMax]
  int frames = 0;  // original T before padding
};

/// ceil(T / 4).
int latent_length(int frames);

/// Left-pads by repeating the first frame up to a multiple of 4.
Mat pad_to_multiple(const Mat& x, int multiple = kDownsample);

/// Throws InputError when T < 4.
LatentDistribution encode(const MotionSequence& x, const VaeModel& model);

/// z = mu + exp(logvar / 2) * noise.
Mat reparameterize(const LatentDistribution& dist, const Mat& noise);

/// Output has 4U frames; frames > 0 drops the leading padding so the result
/// has exactly that many frames.
MotionSequence decode(const Mat& z, const VaeModel& model, int frames = 0, double fps = 20.0);

struct VaeLoss {
  Real total = 0;
  Real rec = 0;
  Real kl = 0;
};

/// Element-mean squared error plus beta times element-mean Gaussian KL.
VaeLoss vae_loss(const Mat& x, const Mat& x_hat, const LatentDistribution& dist, Real beta);

/// Mean over elements of 0.5 (mu^2 + exp(logvar) - 1 - logvar).
Real kl_divergence(const Mat& mu, const Mat& logvar);

// Tape versions over a batch of equal-length sequences stacked along rows.
// seq_len is the per-sequence frame count and must be a multiple of 4.
struct EncoderGraph {
  Var mu;
  Var logvar;
};
EncoderGraph encode_graph(Tape& tape, const VaeModel& model, const Mat& x_batch, int seq_len);
Var decode_graph(Tape& tape, const VaeModel& model, Var z_batch, int latent_len);
Var mse_graph(Var x_hat, const Mat& x);
Var kl_graph(Var mu, Var logvar);
Var vae_loss_graph(Var x_hat, const Mat& x, Var mu, Var logvar, Real beta);

/// Parameter path prefix of the encoder's last layer, where gradient norms
/// for loss balancing are measured.
inline const std::string kEncoderHead = "enc.head.";

}  // namespace cmdm::vae
