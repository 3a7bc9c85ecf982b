#include "cmdm/pipeline/evaluate.hpp"

#include "cmdm/errors.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace cmdm::pipeline {

sampler::Generator make_generator(const io::RunConfig& cfg, const DitModel& dit, const vae::VaeModel& vae) {
  sampler::Generator g;
  g.dit_params = &dit.params;
  g.dit_config = dit.config;
  g.schedule = cfg.inference_schedule();
  g.guidance = cfg.sampler.guidance;
  g.horizon = cfg.sampler.horizon;
  g.norm = dit.norm;
  g.vae = &vae;
  g.fps = cfg.data.fps;
  return g;
}

Real median(std::vector<Real> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

sampler::GenerationReport generate_transition(const io::RunConfig& cfg, const sampler::Generator& gen,
                                              const data::ToyCaption& first, const data::ToyCaption& second,
                                              const std::string& mode, const RngKey& key) {
  sampler::Generator g = gen;
  g.horizon = cfg.eval.horizon;
  const TextCondition caps[] = {first.condition(), second.condition()};
  const int switches[] = {cfg.eval.switch_at};
  const auto track = sampler::caption_track(caps, switches, cfg.eval.long_frames);
  if (mode == "ar") return sampler::ar_generate(g, cfg.eval.long_frames, track, key);
  return sampler::fss_generate(g, sampler::build_fss_matrix(g.schedule.K, cfg.sampler.L, cfg.eval.long_frames), track,
                               key);
}

EvalReport evaluate(const io::RunConfig& cfg, const vae::VaeModel& vae, const DitModel& dit,
                    const std::vector<data::Sample>& data, const EvalOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  r.recon_mse = reconstruction_mse(vae, data);
  Real mp = 0;
  for (const auto& s : data) mp += metrics::mpjpe(s.motion, vae::decode(vae::encode(s.motion, vae).mu, vae, s.motion.length()));
  r.recon_mpjpe = data.empty() ? 0 : mp / static_cast<Real>(data.size());

  const sampler::Generator gen = make_generator(cfg, dit, vae);
  const RngKey root = RngKey{cfg.seed}.derive(hash_string("eval"));
  if (opt.consistency) {
    const auto caps = data::all_captions();
    metrics::ConsistencyOptions co;
    co.n_per_caption = cfg.eval.n_per_caption;
    co.latent_frames = vae::latent_length(cfg.data.frames);
    co.L = cfg.sampler.L;
    co.threads = opt.threads;
    co.seed = root.derive(1).seed;
    co.mode = "ar";
    r.consistency_ar = metrics::consistency_eval(gen, caps, co);
    co.mode = "fss";
    r.consistency_fss = metrics::consistency_eval(gen, caps, co);
  }

  if (opt.transitions) {
    const int n = cfg.eval.transitions;
    r.transitions.resize(static_cast<std::size_t>(n));
    const int transition = cfg.eval.switch_at * vae::kDownsample;
    metrics::parallel_for(n, opt.threads, [&](int i) {
      TransitionSample& s = r.transitions[static_cast<std::size_t>(i)];
      s.first = i % data::kNumCaptions;
      s.second = (s.first + 1 + (i / data::kNumCaptions) % (data::kNumCaptions - 1)) % data::kNumCaptions;
      const auto a = data::ToyCaption::from_index(s.first);
      const auto b = data::ToyCaption::from_index(s.second);
      const RngKey key = root.derive(2).derive(static_cast<std::uint64_t>(i));
      s.ar = metrics::jerk_metrics(generate_transition(cfg, gen, a, b, "ar", key).motion, transition,
                                   cfg.eval.jerk_window);
      s.fss = metrics::jerk_metrics(generate_transition(cfg, gen, a, b, "fss", key).motion, transition,
                                    cfg.eval.jerk_window);
      const auto concat = metrics::hard_concatenation(a, b, transition,
                                                      cfg.data.fps, cfg.data.noise_std, key.derive(3).seed);
      s.baseline = metrics::jerk_metrics(concat, transition, cfg.eval.jerk_window);
    });
    std::vector<Real> ar, fss, base;
    for (const auto& s : r.transitions) {
      ar.push_back(s.ar.auj);
      fss.push_back(s.fss.auj);
      base.push_back(s.baseline.auj);
    }
    r.median_auj_ar = median(ar);
    r.median_auj_fss = median(fss);
    r.median_auj_baseline = median(base);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  const auto calls = [](const metrics::ConsistencyResult& c) {
    long total = 0;
    for (long v : c.model_calls) total += v;
    return c.model_calls.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(c.model_calls.size());
  };
  nlohmann::json j = {
      {"reconstruction", {{"mse", r.recon_mse}, {"mpjpe", r.recon_mpjpe}}},
      {"consistency",
       {{"ar", {{"accuracy", r.consistency_ar.accuracy}, {"samples", r.consistency_ar.target.size()},
                {"mean_model_calls", calls(r.consistency_ar)}}},
        {"fss", {{"accuracy", r.consistency_fss.accuracy}, {"samples", r.consistency_fss.target.size()},
                 {"mean_model_calls", calls(r.consistency_fss)}}}}},
      {"transitions",
       {{"count", r.transitions.size()},
        {"median_auj", {{"ar", r.median_auj_ar}, {"fss", r.median_auj_fss}, {"hard_concat", r.median_auj_baseline}}}}},
      {"seconds", r.seconds},
  };
  return j;
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "kind,index,caption,second_caption,predicted,pj,auj,model_calls\n";
  const auto consistency_rows = [&](const char* kind, const metrics::ConsistencyResult& c) {
    for (std::size_t i = 0; i < c.target.size(); ++i) {
      out << kind << ',' << i << ',' << c.target[i] << ",," << c.predicted[i] << ",,," << c.model_calls[i] << '\n';
    }
  };
  consistency_rows("consistency_ar", r.consistency_ar);
  consistency_rows("consistency_fss", r.consistency_fss);
  for (std::size_t i = 0; i < r.transitions.size(); ++i) {
    const auto& s = r.transitions[i];
    const auto row = [&](const char* kind, const metrics::TransitionEval& e) {
      out << kind << ',' << i << ',' << s.first << ',' << s.second << ",," << e.pj << ',' << e.auj << ",\n";
    };
    row("transition_ar", s.ar);
    row("transition_fss", s.fss);
    row("transition_hard_concat", s.baseline);
  }
  return out.str();
}

}  // namespace cmdm::pipeline
