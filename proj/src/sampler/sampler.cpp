#include "cmdm/sampler/sampler.hpp"

#include "cmdm/errors.hpp"

#include <algorithm>
#include <chrono>

namespace cmdm::sampler {

namespace {

using Clock = std::chrono::steady_clock;

void check_generator(const Generator& gen) {
  if (!gen.dit_params) throw ConfigError("sampler: no denoiser parameters");
  gen.schedule.validate();
  gen.norm.validate(gen.dit_config.latent_dim);
}

Mat initial_latents(const Generator& gen, int T, const RngKey& rng, const SampleOptions& opt) {
  const int d = gen.dit_config.latent_dim;
  if (opt.init_noise.size() > 0) {
    if (opt.init_noise.rows() != T || opt.init_noise.cols() != d) throw ShapeError("sampler: init noise shape mismatch");
    return opt.init_noise;
  }
  Mat z(T, d);
  for (int t = 0; t < T; ++t) z.row(t) = rng.normal(DrawKind::init, t, 0, 1, d);
  return z;
}

std::vector<TextCondition> null_track(const Generator& gen, int T) {
  return std::vector<TextCondition>(static_cast<std::size_t>(T), dit::make_null_condition(gen.dit_config));
}

Mat guided(const Generator& gen, const Mat& cond, const Mat& uncond) {
  return diffusion::cfg_combine(cond, uncond, gen.guidance);
}

// Shared state of one generation: latents, their current levels, the two
// cached model sessions and the bookkeeping for the report.
class RowRunner {
 public:
  RowRunner(const Generator& gen, std::span<const TextCondition> conds, const RngKey& rng, const SampleOptions& opt)
      : gen_(gen),
        conds_(conds.begin(), conds.end()),
        nulls_(null_track(gen, static_cast<int>(conds.size()))),
        rng_(rng),
        cond_(*gen.dit_params, gen.dit_config, gen.horizon),
        uncond_(*gen.dit_params, gen.dit_config, gen.horizon) {
    const int T = static_cast<int>(conds.size());
    z_ = initial_latents(gen, T, rng, opt);
    level_.assign(static_cast<std::size_t>(T), gen.schedule.K);
    report_.completion_row.assign(static_cast<std::size_t>(T), -1);
    start_ = Clock::now();
  }

  // One batched forward, then a reverse step of frames [first, last].
  void step(int first, int last) {
    const int w0 = cond_.committed();
    for (int t = w0; t < first; ++t) {
      if (level_[static_cast<std::size_t>(t)] != 0) throw InputError("sampler: context frame is not clean");
    }
    const int rows = last - w0 + 1;
    std::vector<int> train_levels(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      train_levels[static_cast<std::size_t>(r)] =
          gen_.schedule.train_index[static_cast<std::size_t>(level_[static_cast<std::size_t>(w0 + r)])];
    }
    const Mat window = z_.middleRows(w0, rows);
    const int commit = first - w0;
    Mat eps = cond_.forward(window, train_levels, conds_, commit);
    if (gen_.guidance != 1.0) eps = guided(gen_, eps, uncond_.forward(window, train_levels, nulls_, commit));
    ++report_.model_calls;
    for (int t = first; t <= last; ++t) {
      int& k = level_[static_cast<std::size_t>(t)];
      z_.row(t) = diffusion::reverse_step(z_.row(t), eps.row(t - w0), k, gen_.schedule, rng_, t);
      --k;
      if (k == 0) complete(t);
    }
  }

  int level(int t) const { return level_[static_cast<std::size_t>(t)]; }

  GenerationReport finish() {
    report_.latents = gen_.norm.to_vae(z_);
    report_.wall_time = std::chrono::duration<double>(Clock::now() - start_).count();
    if (gen_.vae) report_.motion = MotionSequence{streamed_, gen_.fps};
    return std::move(report_);
  }

 private:
  // Frames complete in order; each completion emits the next four motion frames.
  void complete(int t) {
    const auto ti = static_cast<std::size_t>(t);
    report_.completion_row[ti] = static_cast<int>(report_.model_calls);
    report_.per_frame_calls.push_back(report_.model_calls - last_completion_);
    last_completion_ = report_.model_calls;
    if (!gen_.vae) return;
    const Mat prefix = gen_.norm.to_vae(z_.topRows(t + 1));
    const Mat decoded = vae::decode(prefix, *gen_.vae).frames;
    const Eigen::Index n = vae::kDownsample;
    Mat grown(streamed_.rows() + n, decoded.cols());
    grown.topRows(streamed_.rows()) = streamed_;
    grown.bottomRows(n) = decoded.bottomRows(n);
    streamed_ = std::move(grown);
  }

  const Generator& gen_;
  std::vector<TextCondition> conds_;
  std::vector<TextCondition> nulls_;
  RngKey rng_;
  dit::DitSession cond_;
  dit::DitSession uncond_;
  Mat z_;
  std::vector<int> level_;
  GenerationReport report_;
  long last_completion_ = 0;
  Mat streamed_;
  Clock::time_point start_;
};

}  // namespace

void ScheduleMatrix::validate() const {
  if (K < 1 || L < 1 || L > K || T < 1) throw ConfigError("schedule matrix: need K >= 1, 1 <= L <= K, T >= 1");
  if (M != K + (T - 1) * L + 1) throw ConfigError("schedule matrix: row count differs from K + (T-1)L + 1");
  if (levels.size() != static_cast<std::size_t>(M) * static_cast<std::size_t>(T)) {
    throw ConfigError("schedule matrix: level grid has the wrong size");
  }
  for (int t = 0; t < T; ++t) {
    if (at(0, t) != K) throw ConfigError("schedule matrix: first row must be all K");
    if (at(M - 1, t) != 0) throw ConfigError("schedule matrix: last row must be all 0");
  }
  for (int m = 0; m < M; ++m) {
    for (int t = 0; t < T; ++t) {
      if (at(m, t) < 0 || at(m, t) > K) throw ConfigError("schedule matrix: level outside [0, K]");
      if (t > 0 && at(m, t) < at(m, t - 1)) {
        throw ConfigError("schedule matrix: row " + std::to_string(m) + " decreases at frame " + std::to_string(t));
      }
      if (m > 0) {
        const int drop = at(m - 1, t) - at(m, t);
        if (drop < 0 || drop > 1) {
          throw ConfigError("schedule matrix: column " + std::to_string(t) + " steps by " + std::to_string(drop) +
                            " at row " + std::to_string(m));
        }
      }
    }
  }
}

Mat LatentNorm::to_model(const Mat& z) const {
  Mat out = z;
  if (mean.size() > 0) out.rowwise() -= mean.row(0);
  if (std.size() > 0) out.array().rowwise() /= std.row(0).array();
  return out;
}

Mat LatentNorm::to_vae(const Mat& z) const {
  Mat out = z;
  if (std.size() > 0) out.array().rowwise() *= std.row(0).array();
  if (mean.size() > 0) out.rowwise() += mean.row(0);
  return out;
}

void LatentNorm::validate(int latent_dim) const {
  for (const Mat* m : {&mean, &std}) {
    if (m->size() > 0 && (m->rows() != 1 || m->cols() != latent_dim)) {
      throw ConfigError("sampler: latent normalisation width differs from the denoiser's");
    }
  }
  if (std.size() > 0 && !(std.array() > 0).all()) throw ConfigError("sampler: latent std must be > 0");
}

LatentNorm LatentNorm::fit(const Mat& z) {
  if (z.rows() < 2) throw InputError("LatentNorm::fit: need at least two rows");
  LatentNorm n;
  n.mean = z.colwise().mean();
  const Mat centred = z.rowwise() - n.mean.row(0);
  n.std = (centred.array().square().colwise().sum() / static_cast<Real>(z.rows())).sqrt().cwiseMax(1e-8);
  return n;
}

ScheduleMatrix build_fss_matrix(int K, int L, int T) {
  if (K < 1) throw ConfigError("build_fss_matrix: K must be >= 1");
  if (L < 1 || L > K) throw ConfigError("build_fss_matrix: L must lie in [1, K], got " + std::to_string(L));
  if (T < 1) throw ConfigError("build_fss_matrix: T must be >= 1");
  ScheduleMatrix s{K, L, T, K + (T - 1) * L + 1, {}};
  s.levels.resize(static_cast<std::size_t>(s.M) * static_cast<std::size_t>(T));
  for (int m = 0; m < s.M; ++m) {
    for (int t = 0; t < T; ++t) {
      s.levels[static_cast<std::size_t>(m) * static_cast<std::size_t>(T) + t] = std::clamp(K - m + t * L, 0, K);
    }
  }
  return s;
}

std::vector<TextCondition> caption_track(std::span<const TextCondition> captions, std::span<const int> switch_at,
                                         int T) {
  if (captions.empty()) throw InputError("caption_track: no captions");
  if (switch_at.size() + 1 != captions.size()) {
    throw InputError("caption_track: need one switch point between each pair of captions");
  }
  for (std::size_t i = 1; i < switch_at.size(); ++i) {
    if (switch_at[i] <= switch_at[i - 1]) throw InputError("caption_track: switch points must increase");
  }
  std::vector<TextCondition> out;
  std::size_t c = 0;
  for (int t = 0; t < T; ++t) {
    while (c < switch_at.size() && t >= switch_at[c]) ++c;
    out.push_back(captions[c]);
  }
  return out;
}

GenerationReport ar_generate(const Generator& gen, int T, std::span<const TextCondition> frame_conds,
                             const RngKey& rng, const SampleOptions& opt) {
  check_generator(gen);
  if (T < 1) throw InputError("ar_generate: T must be >= 1");
  if (static_cast<int>(frame_conds.size()) != T) throw ShapeError("ar_generate: one caption per latent frame");
  RowRunner run(gen, frame_conds, rng, opt);
  for (int t = 0; t < T; ++t) {
    while (run.level(t) > 0) run.step(t, t);
  }
  return run.finish();
}

namespace {

// Frames whose level drops between rows m and m+1 form one contiguous run.
std::pair<int, int> active_range(const ScheduleMatrix& s, int m) {
  int first = -1, last = -1;
  for (int t = 0; t < s.T; ++t) {
    if (s.at(m + 1, t) == s.at(m, t) - 1) {
      if (first < 0) first = t;
      last = t;
    }
  }
  return {first, last};
}

void check_matrix(const Generator& gen, const ScheduleMatrix& matrix, std::span<const TextCondition> frame_conds) {
  matrix.validate();
  if (matrix.K != gen.schedule.K) {
    throw ConfigError("fss: matrix K = " + std::to_string(matrix.K) + " but schedule K = " +
                      std::to_string(gen.schedule.K));
  }
  if (static_cast<int>(frame_conds.size()) != matrix.T) throw ShapeError("fss: one caption per latent frame");
}

}  // namespace

GenerationReport fss_generate(const Generator& gen, const ScheduleMatrix& matrix,
                              std::span<const TextCondition> frame_conds, const RngKey& rng,
                              const SampleOptions& opt) {
  check_generator(gen);
  check_matrix(gen, matrix, frame_conds);
  RowRunner run(gen, frame_conds, rng, opt);
  for (int m = 0; m + 1 < matrix.M; ++m) {
    const auto [first, last] = active_range(matrix, m);
    if (first < 0) continue;
    run.step(first, last);
  }
  return run.finish();
}

Mat fss_reference(const Generator& gen, const ScheduleMatrix& matrix, std::span<const TextCondition> frame_conds,
                  const RngKey& rng, const SampleOptions& opt) {
  check_generator(gen);
  check_matrix(gen, matrix, frame_conds);
  const std::vector<TextCondition> nulls = null_track(gen, matrix.T);
  nn::AttentionMask mask;
  mask.horizon = gen.horizon;
  Mat z = initial_latents(gen, matrix.T, rng, opt);
  for (int m = 0; m + 1 < matrix.M; ++m) {
    const Mat snapshot = z;
    for (int t = 0; t < matrix.T; ++t) {
      const int k = matrix.at(m, t);
      if (matrix.at(m + 1, t) != k - 1) continue;
      std::vector<int> train_levels(static_cast<std::size_t>(t) + 1);
      for (int j = 0; j <= t; ++j) {
        train_levels[static_cast<std::size_t>(j)] = gen.schedule.train_index[static_cast<std::size_t>(matrix.at(m, j))];
      }
      const Mat ctx = snapshot.topRows(t + 1);
      const std::size_t n = static_cast<std::size_t>(t) + 1;
      const Mat eps_c = dit::dit_forward(*gen.dit_params, gen.dit_config, ctx, train_levels,
                                         frame_conds.subspan(0, n), mask);
      Mat eps = eps_c;
      if (gen.guidance != 1.0) {
        eps = guided(gen, eps_c, dit::dit_forward(*gen.dit_params, gen.dit_config, ctx, train_levels,
                                                  std::span<const TextCondition>(nulls).subspan(0, n), mask));
      }
      z.row(t) = diffusion::reverse_step(snapshot.row(t), eps.row(t), k, gen.schedule, rng, t);
    }
  }
  return gen.norm.to_vae(z);
}

}  // namespace cmdm::sampler
