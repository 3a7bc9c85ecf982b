#include "cmdm/io/config.hpp"

#include "cmdm/errors.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

namespace cmdm::io {

using nlohmann::json;

namespace {

// Calls f(section, key, field) for every configurable field, in a fixed order.
template <class Cfg, class F>
void visit_fields(Cfg& c, F&& f) {
  f("data", "samples_per_caption", c.data.samples_per_caption);
  f("data", "frames", c.data.frames);
  f("data", "fps", c.data.fps);
  f("data", "noise_std", c.data.noise_std);
  f("data", "seed", c.data.seed);

  f("vae", "channels", c.vae.channels);
  f("vae", "latent_dim", c.vae.latent_dim);
  f("vae", "beta", c.vae.beta);
  f("vae", "m1", c.vae.m1);
  f("vae", "m2", c.vae.m2);
  f("vae", "lambda_max", c.vae.lambda_max);
  f("vae", "lambda_eps", c.vae.lambda_eps);
  f("vae", "feature_dim", c.vae.feature_dim);
  f("vae", "mdms_projected", c.vae.mdms_projected);
  f("vae", "oracle_seed", c.vae.oracle_seed);

  f("dit", "layers", c.dit.layers);
  f("dit", "heads", c.dit.heads);
  f("dit", "hidden", c.dit.hidden);
  f("dit", "mlp_ratio", c.dit.mlp_ratio);

  f("diffusion", "K", c.diffusion.K);
  f("diffusion", "schedule", c.diffusion.schedule);
  f("diffusion", "drop_prob", c.diffusion.drop_prob);

  f("sampler", "mode", c.sampler.mode);
  f("sampler", "K", c.sampler.K);
  f("sampler", "L", c.sampler.L);
  f("sampler", "guidance", c.sampler.guidance);
  f("sampler", "horizon", c.sampler.horizon);

  f("train", "vae_steps", c.train.vae_steps);
  f("train", "vae_batch", c.train.vae_batch);
  f("train", "vae_lr", c.train.vae_lr);
  f("train", "dit_steps", c.train.dit_steps);
  f("train", "dit_batch", c.train.dit_batch);
  f("train", "dit_lr", c.train.dit_lr);
  f("train", "weight_decay", c.train.weight_decay);
  f("train", "grad_clip", c.train.grad_clip);
  f("train", "warmup", c.train.warmup);
  f("train", "log_every", c.train.log_every);

  f("eval", "n_per_caption", c.eval.n_per_caption);
  f("eval", "long_frames", c.eval.long_frames);
  f("eval", "switch_at", c.eval.switch_at);
  f("eval", "jerk_window", c.eval.jerk_window);
  f("eval", "transitions", c.eval.transitions);
  f("eval", "horizon", c.eval.horizon);
  f("eval", "threads", c.eval.threads);
}

const std::vector<std::string>& section_names() {
  static const std::vector<std::string> names{"data", "vae", "dit", "diffusion", "sampler", "train", "eval"};
  return names;
}

template <class T>
void read_value(const json& v, T& out, const std::string& key) {
  const bool ok = [&] {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_same_v<T, std::uint64_t>) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else return v.is_number();
  }();
  if (!ok) throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  out = v.get<T>();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void require(bool ok, const std::string& key, const std::string& rule) {
  if (!ok) throw ConfigError("config key '" + key + "' " + rule);
}

}  // namespace

void RunConfig::validate() const {
  require(data.samples_per_caption >= 1, "data.samples_per_caption", "must be >= 1");
  require(data.frames >= 16 && data.frames % 4 == 0, "data.frames", "must be a multiple of 4 and >= 16");
  require(data.fps > 0, "data.fps", "must be > 0");
  require(data.noise_std >= 0, "data.noise_std", "must be >= 0");
  require(vae.channels >= 1, "vae.channels", "must be >= 1");
  require(vae.latent_dim >= 1, "vae.latent_dim", "must be >= 1");
  require(vae.beta >= 0, "vae.beta", "must be >= 0");
  require(vae.m1 >= 0 && vae.m1 < 1, "vae.m1", "must lie in [0, 1)");
  require(vae.m2 >= 0 && vae.m2 < 1, "vae.m2", "must lie in [0, 1)");
  require(vae.lambda_max > 0, "vae.lambda_max", "must be > 0");
  require(vae.lambda_eps >= 0, "vae.lambda_eps", "must be >= 0");
  require(vae.feature_dim >= 1, "vae.feature_dim", "must be >= 1");
  require(dit.layers >= 1, "dit.layers", "must be >= 1");
  require(dit.heads >= 1 && dit.hidden % dit.heads == 0 && (dit.hidden / dit.heads) % 2 == 0, "dit.heads",
          "must divide dit.hidden into even head widths");
  require(dit.mlp_ratio >= 1, "dit.mlp_ratio", "must be >= 1");
  require(diffusion.K >= 1, "diffusion.K", "must be >= 1");
  require(diffusion.schedule == "linear" || diffusion.schedule == "cosine", "diffusion.schedule",
          "must be linear or cosine");
  require(diffusion.drop_prob >= 0 && diffusion.drop_prob <= 1, "diffusion.drop_prob", "must lie in [0, 1]");
  require(sampler.mode == "ar" || sampler.mode == "fss", "sampler.mode", "must be ar or fss");
  require(sampler.K >= 1 && sampler.K <= diffusion.K, "sampler.K", "must lie in [1, diffusion.K]");
  require(sampler.L >= 1 && sampler.L <= sampler.K, "sampler.L", "must lie in [1, sampler.K]");
  require(sampler.horizon >= 0, "sampler.horizon", "must be >= 0");
  require(train.vae_steps >= 0 && train.dit_steps >= 0, "train.*_steps", "must be >= 0");
  require(train.vae_batch >= 1, "train.vae_batch", "must be >= 1");
  require(train.dit_batch >= 1, "train.dit_batch", "must be >= 1");
  require(train.vae_lr > 0, "train.vae_lr", "must be > 0");
  require(train.dit_lr > 0, "train.dit_lr", "must be > 0");
  require(train.grad_clip > 0, "train.grad_clip", "must be > 0");
  require(train.warmup >= 0, "train.warmup", "must be >= 0");
  require(train.log_every >= 1, "train.log_every", "must be >= 1");
  require(eval.n_per_caption >= 1, "eval.n_per_caption", "must be >= 1");
  require(eval.switch_at >= 1 && eval.switch_at < eval.long_frames, "eval.switch_at",
          "must lie inside eval.long_frames");
  require(eval.jerk_window >= 4, "eval.jerk_window", "must be >= 4");
  require(eval.transitions >= 1, "eval.transitions", "must be >= 1");
  require(eval.horizon >= 0, "eval.horizon", "must be >= 0");
  require(eval.threads >= 1, "eval.threads", "must be >= 1");
}

data::DatasetSpec RunConfig::dataset_spec() const {
  return {data.samples_per_caption, data.frames, data.fps, data.noise_std, data.seed};
}

vae::VaeConfig RunConfig::vae_config() const { return {4, vae.channels, vae.latent_dim, vae.beta}; }

align::AlignConfig RunConfig::align_config() const {
  return {vae.m1, vae.m2, vae.lambda_max, vae.lambda_eps, vae.feature_dim, vae.mdms_projected};
}

dit::DitConfig RunConfig::dit_config() const {
  dit::DitConfig c;
  c.layers = dit.layers;
  c.heads = dit.heads;
  c.hidden = dit.hidden;
  c.mlp_ratio = dit.mlp_ratio;
  c.latent_dim = vae.latent_dim;
  c.vocab = data::kVocabSize;
  c.cond_length = 2;
  c.max_level = diffusion.K;
  return c;
}

diffusion::DiffusionSchedule RunConfig::train_schedule() const {
  return diffusion::build_schedule(diffusion.K, diffusion::parse_schedule_kind(diffusion.schedule));
}

diffusion::DiffusionSchedule RunConfig::inference_schedule() const {
  return diffusion::subsample_schedule(train_schedule(), sampler.K);
}

json to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& s : section_names()) j[s] = json::object();
  visit_fields(cfg, [&](const char* section, const char* key, const auto& field) { j[section][key] = field; });
  j["seed"] = cfg.seed;
  return j;
}

RunConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  std::map<std::string, std::set<std::string>> known;
  RunConfig probe;
  visit_fields(probe, [&](const char* section, const char* key, auto&) { known[section].insert(key); });
  for (const auto& [section, body] : j.items()) {
    if (section == "seed") continue;
    if (!known.count(section)) throw ConfigError("unknown config section '" + section + "'");
    if (!body.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      if (!known[section].count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
  }
  RunConfig cfg;
  visit_fields(cfg, [&](const char* section, const char* key, auto& field) {
    if (j.contains(section) && j[section].contains(key)) {
      read_value(j[section][key], field, std::string(section) + "." + key);
    }
  });
  if (j.contains("seed")) read_value(j["seed"], cfg.seed, "seed");
  cfg.validate();
  return cfg;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    doc[path] = value;
  } else {
    doc[path.substr(0, dot)][path.substr(dot + 1)] = value;
  }
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    try {
      doc = json::parse(f);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return from_json(doc);
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << to_json(cfg).dump(2) << "\n";
}

std::filesystem::path default_config_dir() {
  if (const char* dir = std::getenv("CMDM_CONFIG_DIR"); dir && *dir) return dir;
  return "configs";
}

std::uint64_t vae_hash(const RunConfig& cfg) {
  const json j = to_json(cfg);
  return fnv1a(j["data"].dump() + j["vae"].dump());
}

std::uint64_t dit_hash(const RunConfig& cfg) {
  const json j = to_json(cfg);
  return fnv1a(j["data"].dump() + j["vae"].dump() + j["dit"].dump() + j["diffusion"].dump());
}

}  // namespace cmdm::io
