#include "cmdm/pipeline/train.hpp"

#include "cmdm/align/align.hpp"
#include "cmdm/diffusion/training.hpp"
#include "cmdm/errors.hpp"
#include "cmdm/io/tensor_io.hpp"
#include "cmdm/nn/init.hpp"
#include "cmdm/nn/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cmdm::pipeline {

namespace {

using nn::Tape;
using nn::Var;

constexpr const char* kAlignW = "align.w";

Real head_grad_norm(const nn::ParamTree& grads) {
  Real sq = 0;
  for (const auto& [path, g] : grads) {
    if (path.rfind(vae::kEncoderHead, 0) == 0) sq += g.squaredNorm();
  }
  return std::sqrt(sq);
}

std::vector<int> pick_batch(const RngKey& key, long step, int batch, std::size_t n) {
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    idx[static_cast<std::size_t>(b)] =
        static_cast<int>(key.uniform_int(DrawKind::data, b, step, 0, static_cast<std::int64_t>(n) - 1));
  }
  return idx;
}

void require_data(const std::vector<data::Sample>& data, int frames) {
  if (data.empty()) throw InputError("training data is empty");
  for (const auto& s : data) {
    if (s.motion.length() != frames) {
      throw InputError("training sample has " + std::to_string(s.motion.length()) + " frames, config says " +
                       std::to_string(frames));
    }
  }
}

void write_checkpoint(const std::filesystem::path& path, io::TensorList entries, std::uint64_t hash) {
  entries.push_back({"meta.config_hash", io::Tensor::from_i64({static_cast<std::int64_t>(hash)})});
  io::write_tensors(path, entries);
}

io::TensorList read_checkpoint(const std::filesystem::path& path, std::uint64_t expected, const char* what) {
  if (!std::filesystem::exists(path)) throw InputError(std::string(what) + " checkpoint not found: " + path.string());
  io::TensorList entries = io::read_tensors(path);
  const auto stored = static_cast<std::uint64_t>(io::find_tensor(entries, "meta.config_hash").to_i64().at(0));
  if (stored != expected) {
    throw ConfigError(std::string(what) + " checkpoint " + path.string() +
                      " was trained under a different configuration (hash mismatch)");
  }
  return entries;
}

}  // namespace

vae::VaeModel init_vae_model(const io::RunConfig& cfg) {
  const RngKey key = RngKey{cfg.seed}.derive(hash_string("vae"));
  vae::VaeModel m{cfg.vae_config(), vae::init_vae(cfg.vae_config(), key)};
  const int dz = cfg.vae.latent_dim;
  m.params.add(kAlignW, nn::init_normal(key, kAlignW, cfg.vae.feature_dim, dz, 1.0 / std::sqrt(Real(dz))));
  return m;
}

void train_vae(vae::VaeModel& model, const io::RunConfig& cfg, const std::vector<data::Sample>& data,
               const LogFn& log) {
  require_data(data, cfg.data.frames);
  const align::AlignConfig acfg = cfg.align_config();
  const int T = cfg.data.frames;
  const int U = vae::latent_length(T);
  const int B = cfg.train.vae_batch;
  const Real beta = cfg.vae.beta;

  std::vector<Mat> features;
  features.reserve(data.size());
  for (const auto& s : data) {
    features.push_back(align::semantic_oracle(s.motion, s.caption.condition(), cfg.vae.oracle_seed, acfg.feature_dim));
  }

  const RngKey key = RngKey{cfg.seed}.derive(hash_string("train-vae"));
  nn::AdamW opt({.weight_decay = cfg.train.weight_decay});
  for (long step = 0; step < cfg.train.vae_steps; ++step) {
    const auto idx = pick_batch(key, step, B, data.size());
    Mat x(B * T, 4), f(B * U, acfg.feature_dim), noise(B * U, cfg.vae.latent_dim);
    for (int b = 0; b < B; ++b) {
      const auto i = static_cast<std::size_t>(idx[static_cast<std::size_t>(b)]);
      x.middleRows(b * T, T) = data[i].motion.frames;
      f.middleRows(b * U, U) = features[i];
      noise.middleRows(b * U, U) = key.normal(DrawKind::reparam, b, step, U, cfg.vae.latent_dim);
    }

    Tape tape;
    auto enc = vae::encode_graph(tape, model, x, T);
    auto z = nn::add(enc.mu, nn::mul(nn::exp(nn::scale(enc.logvar, 0.5)), tape.constant(noise)));
    auto rec = vae::mse_graph(vae::decode_graph(tape, model, z, U), x);
    auto kl = vae::kl_graph(enc.mu, enc.logvar);
    Var w = tape.param(model.params, kAlignW);
    Var zp = align::project_latents(enc.mu, w);
    Var mdms;
    for (int b = 0; b < B; ++b) {
      Var rows = nn::slice_rows(acfg.mdms_projected ? zp : enc.mu, b * U, U);
      Var term = align::mdms_loss(rows, f.middleRows(b * U, U), acfg.m2);
      mdms = b == 0 ? term : nn::add(mdms, term);
    }
    auto align_loss = nn::add(align::mcos_loss(zp, f, acfg.m1), nn::scale(mdms, 1.0 / B));

    tape.backward(rec);
    const nn::ParamTree g_rec = tape.param_grads();
    tape.backward(align_loss);
    const nn::ParamTree g_align = tape.param_grads();
    const Real lambda = align::adaptive_lambda(head_grad_norm(g_rec), head_grad_norm(g_align), acfg);

    nn::ParamTree grads = model.params.zeros_like();
    grads.axpy(1.0, g_rec);
    grads.axpy(lambda, g_align);
    if (beta > 0) {
      tape.backward(kl);
      grads.axpy(beta, tape.param_grads());
    }
    grads.check_finite("vae gradients");
    const Real gnorm = nn::clip_grad_norm(grads, cfg.train.grad_clip);
    const Real lr = nn::cosine_lr(step, cfg.train.vae_steps, cfg.train.vae_lr, cfg.train.warmup);
    opt.step(model.params, grads, lr);

    if (log && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.vae_steps)) {
      const Real total = rec.scalar() + beta * kl.scalar() + lambda * align_loss.scalar();
      log({step, total, rec.scalar(), kl.scalar(), align_loss.scalar(), lambda, lr, gnorm});
    }
  }
  model.params.check_finite("vae parameters after training");
}

Real reconstruction_mse(const vae::VaeModel& model, const std::vector<data::Sample>& data) {
  if (data.empty()) return 0;
  Real total = 0;
  for (const auto& s : data) {
    const auto dist = vae::encode(s.motion, model);
    const Mat x_hat = vae::decode(dist.mu, model, s.motion.length()).frames;
    total += (x_hat - s.motion.frames).squaredNorm() / static_cast<Real>(x_hat.size());
  }
  return total / static_cast<Real>(data.size());
}

Mat encode_means(const vae::VaeModel& model, const std::vector<data::Sample>& data) {
  if (data.empty()) return Mat(0, model.config.latent_dim);
  const int U = vae::latent_length(data.front().motion.length());
  Mat out(static_cast<Eigen::Index>(data.size()) * U, model.config.latent_dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.middleRows(static_cast<Eigen::Index>(i) * U, U) = vae::encode(data[i].motion, model).mu;
  }
  return out;
}

DitModel init_dit_model(const io::RunConfig& cfg, const vae::VaeModel& vae) {
  DitModel m;
  m.config = cfg.dit_config();
  if (m.config.latent_dim != vae.config.latent_dim) throw ConfigError("dit latent width differs from the VAE's");
  m.params = dit::init_dit(m.config, RngKey{cfg.seed}.derive(hash_string("dit")), dit::DitInit::identity);
  return m;
}

void train_dit(DitModel& model, const io::RunConfig& cfg, const vae::VaeModel& vae,
               const std::vector<data::Sample>& data, const LogFn& log) {
  require_data(data, cfg.data.frames);
  const int U = vae::latent_length(cfg.data.frames);
  const int B = cfg.train.dit_batch;
  const Mat means = encode_means(vae, data);
  model.norm = sampler::LatentNorm::fit(means);
  const Mat latents = model.norm.to_model(means);

  const auto schedule = cfg.train_schedule();
  const TextCondition null_cond = dit::make_null_condition(model.config);
  const diffusion::Predictor predictor = diffusion::dit_predictor(model.params, model.config);
  diffusion::DfOptions df_opt;
  df_opt.drop_prob = cfg.diffusion.drop_prob;
  const RngKey key = RngKey{cfg.seed}.derive(hash_string("train-dit"));
  nn::AdamW opt({.weight_decay = cfg.train.weight_decay});
  for (long step = 0; step < cfg.train.dit_steps; ++step) {
    const auto idx = pick_batch(key, step, B, data.size());
    Mat z(B * U, model.config.latent_dim);
    std::vector<TextCondition> conds;
    for (int b = 0; b < B; ++b) {
      const auto i = idx[static_cast<std::size_t>(b)];
      z.middleRows(b * U, U) = latents.middleRows(static_cast<Eigen::Index>(i) * U, U);
      conds.push_back(data[static_cast<std::size_t>(i)].caption.condition());
    }
    const auto batch = diffusion::df_prepare(z, conds, U, schedule, key.derive(static_cast<std::uint64_t>(step)),
                                             null_cond, df_opt);
    Tape tape;
    Var loss = diffusion::df_training_loss(tape, predictor, batch);
    tape.backward(loss);
    nn::ParamTree grads = tape.param_grads();
    grads.check_finite("denoiser gradients");
    const Real gnorm = nn::clip_grad_norm(grads, cfg.train.grad_clip);
    const Real lr = nn::cosine_lr(step, cfg.train.dit_steps, cfg.train.dit_lr, cfg.train.warmup);
    opt.step(model.params, grads, lr);
    if (log && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.dit_steps)) {
      log({.step = step, .loss = loss.scalar(), .lr = lr, .grad_norm = gnorm});
    }
  }
  model.params.check_finite("denoiser parameters after training");
}

void save_vae(const std::filesystem::path& path, const vae::VaeModel& model, const io::RunConfig& cfg) {
  write_checkpoint(path, io::to_tensors(model.params), io::vae_hash(cfg));
}

vae::VaeModel load_vae(const std::filesystem::path& path, const io::RunConfig& cfg) {
  const auto entries = read_checkpoint(path, io::vae_hash(cfg), "VAE");
  vae::VaeModel m{cfg.vae_config(), {}};
  for (const auto& e : entries) {
    if (e.name.rfind("meta.", 0) != 0) m.params.add(e.name, e.tensor.to_mat());
  }
  return m;
}

void save_dit(const std::filesystem::path& path, const DitModel& model, const io::RunConfig& cfg) {
  io::TensorList entries = io::to_tensors(model.params);
  entries.push_back({"meta.latent_mean", io::Tensor::from_mat(model.norm.mean)});
  entries.push_back({"meta.latent_std", io::Tensor::from_mat(model.norm.std)});
  write_checkpoint(path, std::move(entries), io::dit_hash(cfg));
}

DitModel load_dit(const std::filesystem::path& path, const io::RunConfig& cfg) {
  const auto entries = read_checkpoint(path, io::dit_hash(cfg), "denoiser");
  DitModel m;
  m.config = cfg.dit_config();
  m.norm.mean = io::find_tensor(entries, "meta.latent_mean").to_mat();
  m.norm.std = io::find_tensor(entries, "meta.latent_std").to_mat();
  m.norm.validate(m.config.latent_dim);
  for (const auto& e : entries) {
    if (e.name.rfind("meta.", 0) != 0) m.params.add(e.name, e.tensor.to_mat());
  }
  return m;
}

void save_dataset(const std::filesystem::path& path, const std::vector<data::Sample>& data,
                  const data::DatasetSpec& spec) {
  io::TensorList entries;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto tok = data[i].caption.tokens();
    const std::string base = "sample." + std::to_string(i);
    entries.push_back({base + ".tokens", io::Tensor::from_i64({tok[0], tok[1]})});
    entries.push_back({base + ".motion", io::Tensor::from_mat(data[i].motion.frames)});
  }
  io::write_tensors(path, entries);

  nlohmann::json manifest = {
      {"samples", data.size()},
      {"captions", data::kNumCaptions},
      {"spec",
       {{"samples_per_caption", spec.samples_per_caption},
        {"frames", spec.frames},
        {"fps", spec.fps},
        {"noise_std", spec.noise_std},
        {"seed", spec.seed}}},
      {"channels", {"x", "y", "vx", "vy"}},
  };
  std::filesystem::path mpath = path;
  mpath.replace_extension(".json");
  std::ofstream(mpath) << manifest.dump(2) << "\n";
}

std::vector<data::Sample> load_dataset(const std::filesystem::path& path, double fps) {
  const io::TensorList entries = io::read_tensors(path);
  std::vector<data::Sample> out;
  for (std::size_t i = 0;; ++i) {
    const std::string base = "sample." + std::to_string(i);
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.name == base + ".tokens"; });
    if (it == entries.end()) break;
    const auto ids = it->tensor.to_i64();
    const std::vector<int> tok(ids.begin(), ids.end());
    out.push_back({data::ToyCaption::from_tokens(tok), MotionSequence{io::find_tensor(entries, base + ".motion").to_mat(), fps}});
  }
  return out;
}

}  // namespace cmdm::pipeline
