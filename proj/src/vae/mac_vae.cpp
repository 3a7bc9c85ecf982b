#include "cmdm/vae/mac_vae.hpp"

#include "cmdm/errors.hpp"
#include "cmdm/nn/init.hpp"
#include "cmdm/nn/kernels.hpp"
#include "cmdm/nn/param_source.hpp"

#include <cmath>

namespace cmdm::vae {

namespace {

using nn::EvalParams;
using nn::TapeParams;

constexpr int kKernel = 3;

enum class Width { motion, channels, latent, latent2 };

struct ConvSpec {
  const char* name;
  int kernel;
  Width in;
  Width out;
};

// Plain convolutions of both sides. Residual blocks hold two kernel-3 convs each.
constexpr ConvSpec kConvs[] = {
    {"enc.in", kKernel, Width::motion, Width::channels},    {"enc.down0", kKernel, Width::channels, Width::channels},
    {"enc.c0", kKernel, Width::channels, Width::channels},  {"enc.down1", kKernel, Width::channels, Width::channels},
    {"enc.c1", kKernel, Width::channels, Width::channels},  {"enc.c2", kKernel, Width::channels, Width::channels},
    {"enc.head", 1, Width::channels, Width::latent2},       {"dec.in", kKernel, Width::latent, Width::channels},
    {"dec.c0", kKernel, Width::channels, Width::channels},  {"dec.up0", kKernel, Width::channels, Width::channels},
    {"dec.c1", kKernel, Width::channels, Width::channels},  {"dec.up1", kKernel, Width::channels, Width::channels},
    {"dec.c2", kKernel, Width::channels, Width::channels},  {"dec.out", 1, Width::channels, Width::motion},
};
constexpr const char* kResBlocks[] = {"enc.res0", "enc.res1", "dec.res0", "dec.res1"};

int width(const VaeConfig& cfg, Width w) {
  switch (w) {
    case Width::motion: return cfg.input_dim;
    case Width::channels: return cfg.channels;
    case Width::latent: return cfg.latent_dim;
    case Width::latent2: return 2 * cfg.latent_dim;
  }
  return 0;
}

void add_conv(ParamTree& tree, const RngKey& key, const std::string& name, int kernel, int cin, int cout) {
  const Real std = 1.0 / std::sqrt(static_cast<Real>(kernel * cin));
  tree.add(name + ".w", nn::init_normal(key, name + ".w", kernel * cin, cout, std));
  tree.add(name + ".b", Mat::Zero(1, cout));
}

template <class P>
typename P::Value conv(const P& p, const typename P::Value& x, const std::string& name, int kernel, int stride,
                       int segment) {
  return nn::linear(nn::causal_im2col(x, kernel, stride, segment), p(name + ".w"), p(name + ".b"));
}

template <class P>
typename P::Value resblock(const P& p, const typename P::Value& x, const std::string& name, int segment) {
  auto h = conv(p, nn::silu(x), name + ".a", kKernel, 1, segment);
  h = conv(p, nn::silu(h), name + ".b", kKernel, 1, segment);
  return nn::add(x, h);
}

template <class P>
std::pair<typename P::Value, typename P::Value> encoder_forward(const P& p, const VaeConfig& cfg,
                                                                const typename P::Value& x, int seq_len) {
  using nn::silu;
  const int t2 = seq_len / 2;
  const int t4 = seq_len / 4;
  auto h = conv(p, x, "enc.in", kKernel, 1, seq_len);
  h = conv(p, silu(h), "enc.down0", kKernel, 2, seq_len);
  h = conv(p, silu(h), "enc.c0", kKernel, 1, t2);
  h = resblock(p, h, "enc.res0", t2);
  h = conv(p, silu(h), "enc.down1", kKernel, 2, t2);
  h = conv(p, silu(h), "enc.c1", kKernel, 1, t4);
  h = resblock(p, h, "enc.res1", t4);
  h = conv(p, silu(h), "enc.c2", kKernel, 1, t4);
  auto out = conv(p, silu(h), "enc.head", 1, 1, t4);
  auto mu = nn::slice_cols(out, 0, cfg.latent_dim);
  auto logvar = nn::clamp(nn::slice_cols(out, cfg.latent_dim, cfg.latent_dim), kLogvarMin, kLogvarMax);
  return {mu, logvar};
}

template <class P>
typename P::Value decoder_forward(const P& p, const typename P::Value& z, int latent_len) {
  using nn::silu;
  const int u2 = latent_len * 2;
  const int u4 = latent_len * 4;
  auto h = conv(p, z, "dec.in", kKernel, 1, latent_len);
  h = conv(p, silu(h), "dec.c0", kKernel, 1, latent_len);
  h = resblock(p, h, "dec.res0", latent_len);
  h = conv(p, nn::upsample_rows(silu(h), 2), "dec.up0", kKernel, 1, u2);
  h = conv(p, silu(h), "dec.c1", kKernel, 1, u2);
  h = resblock(p, h, "dec.res1", u2);
  h = conv(p, nn::upsample_rows(silu(h), 2), "dec.up1", kKernel, 1, u4);
  h = conv(p, silu(h), "dec.c2", kKernel, 1, u4);
  return conv(p, silu(h), "dec.out", 1, 1, u4);
}

void check_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string("vae_loss: non-finite ") + what);
}

}  // namespace

void VaeConfig::validate() const {
  if (input_dim < 1) throw ConfigError("vae.input_dim must be >= 1");
  if (channels < 1) throw ConfigError("vae.channels must be >= 1");
  if (latent_dim < 1) throw ConfigError("vae.latent_dim must be >= 1");
  if (!(beta >= 0)) throw ConfigError("vae.beta must be >= 0");
}

ParamTree init_vae(const VaeConfig& cfg, const RngKey& key) {
  cfg.validate();
  ParamTree tree;
  for (const ConvSpec& c : kConvs) add_conv(tree, key, c.name, c.kernel, width(cfg, c.in), width(cfg, c.out));
  for (const char* r : kResBlocks) {
    add_conv(tree, key, std::string(r) + ".a", kKernel, cfg.channels, cfg.channels);
    add_conv(tree, key, std::string(r) + ".b", kKernel, cfg.channels, cfg.channels);
  }
  return tree;
}

int latent_length(int frames) { return (frames + kDownsample - 1) / kDownsample; }

Mat pad_to_multiple(const Mat& x, int multiple) {
  const Eigen::Index pad = (multiple - x.rows() % multiple) % multiple;
  if (pad == 0) return x;
  Mat out(x.rows() + pad, x.cols());
  out.topRows(pad) = x.row(0).replicate(pad, 1);
  out.bottomRows(x.rows()) = x;
  return out;
}

LatentDistribution encode(const MotionSequence& x, const VaeModel& model) {
  const int t = x.length();
  if (t < kDownsample) {
    throw InputError("encode: sequence of " + std::to_string(t) + " frames is shorter than " +
                     std::to_string(kDownsample));
  }
  if (x.dim() != model.config.input_dim) {
    throw ShapeError("encode: motion has " + std::to_string(x.dim()) + " channels, model expects " +
                     std::to_string(model.config.input_dim));
  }
  const Mat padded = pad_to_multiple(x.frames);
  auto [mu, logvar] = encoder_forward(EvalParams{model.params}, model.config, padded, static_cast<int>(padded.rows()));
  return {std::move(mu), std::move(logvar), t};
}

Mat reparameterize(const LatentDistribution& dist, const Mat& noise) {
  if (noise.rows() != dist.mu.rows() || noise.cols() != dist.mu.cols() || dist.logvar.rows() != dist.mu.rows() ||
      dist.logvar.cols() != dist.mu.cols()) {
    throw ShapeError("reparameterize: noise shape does not match the distribution");
  }
  return dist.mu.array() + (0.5 * dist.logvar.array()).exp() * noise.array();
}

MotionSequence decode(const Mat& z, const VaeModel& model, int frames, double fps) {
  if (z.rows() < 1) throw ShapeError("decode: empty latent sequence");
  if (z.cols() != model.config.latent_dim) throw ShapeError("decode: latent width mismatch");
  Mat out = decoder_forward(EvalParams{model.params}, z, static_cast<int>(z.rows()));
  if (frames > 0) {
    if (frames > out.rows()) throw ShapeError("decode: requested more frames than the latents cover");
    out = out.bottomRows(frames).eval();
  }
  return MotionSequence{std::move(out), fps};
}

Real kl_divergence(const Mat& mu, const Mat& logvar) {
  if (mu.size() == 0) return 0;
  const auto terms = 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array());
  return terms.sum() / static_cast<Real>(mu.size());
}

VaeLoss vae_loss(const Mat& x, const Mat& x_hat, const LatentDistribution& dist, Real beta) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw ShapeError("vae_loss: x and x_hat differ in shape");
  check_finite(x, "x");
  check_finite(x_hat, "x_hat");
  check_finite(dist.mu, "mu");
  check_finite(dist.logvar, "logvar");
  VaeLoss l;
  l.rec = (x - x_hat).squaredNorm() / static_cast<Real>(x.size());
  l.kl = kl_divergence(dist.mu, dist.logvar);
  l.total = l.rec + beta * l.kl;
  return l;
}

EncoderGraph encode_graph(Tape& tape, const VaeModel& model, const Mat& x_batch, int seq_len) {
  if (seq_len % kDownsample != 0 || x_batch.rows() % seq_len != 0) {
    throw ShapeError("encode_graph: batch rows must be whole sequences of a multiple of 4 frames");
  }
  auto [mu, logvar] = encoder_forward(TapeParams{tape, model.params}, model.config, tape.constant(x_batch), seq_len);
  return {mu, logvar};
}

Var decode_graph(Tape& tape, const VaeModel& model, Var z_batch, int latent_len) {
  return decoder_forward(TapeParams{tape, model.params}, z_batch, latent_len);
}

Var mse_graph(Var x_hat, const Mat& x) {
  return nn::mean(nn::square(nn::sub(x_hat, x_hat.tape->constant(x))));
}

Var kl_graph(Var mu, Var logvar) {
  auto terms = nn::sub(nn::add(nn::square(mu), nn::exp(logvar)), nn::add_scalar(logvar, 1.0));
  return nn::scale(nn::mean(terms), 0.5);
}

Var vae_loss_graph(Var x_hat, const Mat& x, Var mu, Var logvar, Real beta) {
  return nn::add(mse_graph(x_hat, x), nn::scale(kl_graph(mu, logvar), beta));
}

}  // namespace cmdm::vae
