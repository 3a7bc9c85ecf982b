// Command-line entry point: data, train-vae, train-dit, generate, eval, schedule.

#include "cmdm/errors.hpp"
#include "cmdm/io/config.hpp"
#include "cmdm/io/tensor_io.hpp"
#include "cmdm/pipeline/evaluate.hpp"
#include "cmdm/pipeline/train.hpp"
#include "cmdm/sampler/sampler.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace cmdm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

fs::path resolve_config(const std::string& name) {
  if (name.empty()) {
    const fs::path def = io::default_config_dir() / "default.json";
    return fs::exists(def) ? def : fs::path{};
  }
  if (fs::exists(name)) return name;
  fs::path p = io::default_config_dir() / name;
  if (!p.has_extension()) p += ".json";
  if (!fs::exists(p)) throw ConfigError("config '" + name + "' not found (also looked in " + p.string() + ")");
  return p;
}

io::RunConfig load(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> all = c.overrides;
  all.insert(all.end(), extra.begin(), extra.end());
  return io::load_config(resolve_config(c.config), all);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::vector<data::Sample> dataset_for(const io::RunConfig& cfg, const std::string& path) {
  if (path.empty()) return data::build_dataset(cfg.dataset_spec());
  auto d = pipeline::load_dataset(path, cfg.data.fps);
  if (d.empty()) throw InputError("dataset " + path + " holds no samples");
  return d;
}

pipeline::LogFn vae_logger(std::ostream& csv) {
  csv << "step,loss,rec,kl,align,lambda,lr,grad_norm\n";
  return [&csv](const pipeline::TrainLog& l) {
    std::fprintf(stderr, "vae step %ld loss %.6g rec %.6g kl %.6g align %.6g lambda %.4g lr %.3g\n", l.step, l.loss,
                 l.rec, l.kl, l.align, l.lambda, l.lr);
    csv << l.step << ',' << l.loss << ',' << l.rec << ',' << l.kl << ',' << l.align << ',' << l.lambda << ',' << l.lr
        << ',' << l.grad_norm << '\n';
  };
}

pipeline::LogFn dit_logger(std::ostream& csv) {
  csv << "step,loss,lr,grad_norm\n";
  return [&csv](const pipeline::TrainLog& l) {
    std::fprintf(stderr, "dit step %ld loss %.6g lr %.3g grad_norm %.4g\n", l.step, l.loss, l.lr, l.grad_norm);
    csv << l.step << ',' << l.loss << ',' << l.lr << ',' << l.grad_norm << '\n';
  };
}

int cmd_data(const Common& c, const std::string& out) {
  const auto cfg = load(c);
  fs::create_directories(out);
  const auto samples = data::build_dataset(cfg.dataset_spec());
  pipeline::save_dataset(fs::path(out) / "dataset.cmdt", samples, cfg.dataset_spec());
  io::save_config(fs::path(out) / "config.json", cfg);
  std::cout << "wrote " << samples.size() << " samples to " << (fs::path(out) / "dataset.cmdt").string() << "\n";
  return kOk;
}

int cmd_train_vae(const Common& c, const std::string& out, const std::string& data_path) {
  const auto cfg = load(c);
  fs::create_directories(out);
  io::save_config(fs::path(out) / "config.json", cfg);
  const auto samples = dataset_for(cfg, data_path);
  auto model = pipeline::init_vae_model(cfg);
  std::ofstream csv(fs::path(out) / "vae_log.csv");
  pipeline::train_vae(model, cfg, samples, vae_logger(csv));
  pipeline::save_vae(fs::path(out) / "vae.cmdt", model, cfg);
  std::cout << "reconstruction mse " << pipeline::reconstruction_mse(model, samples) << "\n";
  return kOk;
}

int cmd_train_dit(const Common& c, const std::string& out, const std::string& data_path, std::string vae_path) {
  const auto cfg = load(c);
  fs::create_directories(out);
  io::save_config(fs::path(out) / "config.json", cfg);
  if (vae_path.empty()) vae_path = (fs::path(out) / "vae.cmdt").string();
  const auto vae = pipeline::load_vae(vae_path, cfg);
  const auto samples = dataset_for(cfg, data_path);
  auto model = pipeline::init_dit_model(cfg, vae);
  std::ofstream csv(fs::path(out) / "dit_log.csv");
  pipeline::train_dit(model, cfg, vae, samples, dit_logger(csv));
  pipeline::save_dit(fs::path(out) / "dit.cmdt", model, cfg);
  return kOk;
}

struct GenerateArgs {
  std::string run = ".";
  std::optional<std::string> mode;
  std::optional<int> K, L, horizon;
  int frames = 16;
  std::vector<std::string> captions;
  std::vector<int> switch_at;
  std::uint64_t seed = 0;
  std::string out = "generation.cmdt";
};

int cmd_generate(const Common& c, const GenerateArgs& a) {
  std::vector<std::string> extra;
  if (a.mode) extra.push_back("sampler.mode=\"" + *a.mode + "\"");
  if (a.K) extra.push_back("sampler.K=" + std::to_string(*a.K));
  if (a.L) extra.push_back("sampler.L=" + std::to_string(*a.L));
  if (a.horizon) extra.push_back("sampler.horizon=" + std::to_string(*a.horizon));
  const auto cfg = load(c, extra);

  std::vector<TextCondition> caps;
  for (const auto& text : a.captions) {
    const auto cap = data::ToyCaption::parse(text);
    if (!cap) throw InputError("unknown caption '" + text + "'");
    caps.push_back(cap->condition());
  }
  if (caps.empty()) throw InputError("at least one --caption is required");
  if (a.switch_at.size() + 1 != caps.size()) throw InputError("need exactly one --switch-at per caption after the first");

  const auto vae = pipeline::load_vae(fs::path(a.run) / "vae.cmdt", cfg);
  const auto dit = pipeline::load_dit(fs::path(a.run) / "dit.cmdt", cfg);
  const auto gen = pipeline::make_generator(cfg, dit, vae);
  const auto track = sampler::caption_track(caps, a.switch_at, a.frames);
  const RngKey key{a.seed};
  const auto rep = cfg.sampler.mode == "ar"
                       ? sampler::ar_generate(gen, a.frames, track, key)
                       : sampler::fss_generate(gen, sampler::build_fss_matrix(cfg.sampler.K, cfg.sampler.L, a.frames),
                                               track, key);

  const fs::path out = a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_tensors(out, {{"motion", io::Tensor::from_mat(rep.motion.frames)},
                          {"latents", io::Tensor::from_mat(rep.latents)}});
  fs::path cfg_path = out;
  cfg_path.replace_extension(".config.json");
  io::save_config(cfg_path, cfg);
  const nlohmann::json run = {{"seed", a.seed},      {"frames", a.frames},           {"captions", a.captions},
                              {"switch_at", a.switch_at}, {"model_calls", rep.model_calls},
                              {"wall_time", rep.wall_time}};
  fs::path run_path = out;
  run_path.replace_extension(".run.json");
  write_text(run_path, run.dump(2) + "\n");
  std::cout << run.dump() << "\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& run, const std::string& out, std::optional<int> threads) {
  const auto cfg = load(c);
  const auto vae = pipeline::load_vae(fs::path(run) / "vae.cmdt", cfg);
  const auto dit = pipeline::load_dit(fs::path(run) / "dit.cmdt", cfg);
  const auto samples = data::build_dataset(cfg.dataset_spec());
  pipeline::EvalOptions opt;
  opt.threads = threads.value_or(cfg.eval.threads);
  const auto report = pipeline::evaluate(cfg, vae, dit, samples, opt);
  fs::create_directories(out);
  nlohmann::json j = pipeline::to_json(report);
  j["config"] = io::to_json(cfg);
  j["seed"] = cfg.seed;
  write_text(fs::path(out) / "report.json", j.dump(2) + "\n");
  write_text(fs::path(out) / "samples.csv", pipeline::to_csv(report));
  io::save_config(fs::path(out) / "config.json", cfg);
  std::cout << pipeline::to_json(report).dump(2) << "\n";
  return kOk;
}

int cmd_schedule(int K, int L, int frames, const std::string& out) {
  const auto m = sampler::build_fss_matrix(K, L, frames);
  m.validate();
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < m.M; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int t = 0; t < m.T; ++t) row.push_back(m.at(r, t));
    rows.push_back(row);
  }
  const nlohmann::json j = {{"K", K}, {"L", L}, {"frames", frames}, {"rows", m.M}, {"matrix", rows}};
  if (!out.empty()) write_text(out, j.dump() + "\n");
  std::cout << j.dump() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal motion diffusion toolkit"};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config, "Config file or name under $CMDM_CONFIG_DIR");
  app.add_option("-s,--set", common.overrides, "Override, e.g. --set train.vae_steps=100");

  std::string out, data_path, vae_path, run = ".";
  std::optional<int> threads;

  auto* data_cmd = app.add_subcommand("data", "Build the toy dataset");
  data_cmd->add_option("-o,--out", out, "Output directory")->required();

  auto* vae_cmd = app.add_subcommand("train-vae", "Train the causal VAE");
  vae_cmd->add_option("-o,--out", out, "Run directory")->required();
  vae_cmd->add_option("--data", data_path, "Dataset container (default: rebuild from config)");

  auto* dit_cmd = app.add_subcommand("train-dit", "Train the causal denoiser");
  dit_cmd->add_option("-o,--out", out, "Run directory")->required();
  dit_cmd->add_option("--data", data_path, "Dataset container (default: rebuild from config)");
  dit_cmd->add_option("--vae", vae_path, "VAE checkpoint (default: <out>/vae.cmdt)");

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "Generate motion from captions");
  gen_cmd->add_option("--run", gen.run, "Directory holding vae.cmdt and dit.cmdt");
  gen_cmd->add_option("--mode", gen.mode, "ar or fss")->check(CLI::IsMember({"ar", "fss"}));
  gen_cmd->add_option("--K", gen.K, "Inference denoising steps");
  gen_cmd->add_option("--L", gen.L, "Frame lag of the schedule");
  gen_cmd->add_option("--horizon", gen.horizon, "Self-attention window in latent frames");
  gen_cmd->add_option("--frames", gen.frames, "Latent frames (4 motion frames each)")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--caption", gen.captions, "Caption, e.g. \"fast circle\"; repeat for switches")->required();
  gen_cmd->add_option("--switch-at", gen.switch_at, "Latent frame where the next caption starts");
  gen_cmd->add_option("--seed", gen.seed, "Sampling seed");
  gen_cmd->add_option("-o,--out", gen.out, "Output tensor container");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate trained checkpoints");
  eval_cmd->add_option("--run", run, "Directory holding vae.cmdt and dit.cmdt");
  eval_cmd->add_option("-o,--out", out, "Report directory")->required();
  eval_cmd->add_option("--threads", threads, "Evaluation worker threads");

  int K = 0, L = 0, frames = 0;
  std::string sched_out;
  auto* sched_cmd = app.add_subcommand("schedule", "Print the frame-wise schedule matrix as JSON");
  sched_cmd->add_option("--K", K)->required();
  sched_cmd->add_option("--L", L)->required();
  sched_cmd->add_option("--frames", frames)->required();
  sched_cmd->add_option("-o,--out", sched_out, "Also write the JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*data_cmd) return cmd_data(common, out);
    if (*vae_cmd) return cmd_train_vae(common, out, data_path);
    if (*dit_cmd) return cmd_train_dit(common, out, data_path, vae_path);
    if (*gen_cmd) return cmd_generate(common, gen);
    if (*eval_cmd) return cmd_eval(common, run, out, threads);
    if (*sched_cmd) return cmd_schedule(K, L, frames, sched_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
