#include "cmdm/metrics/metrics.hpp"

#include "cmdm/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

namespace cmdm::metrics {

Real mpjpe(const MotionSequence& x, const MotionSequence& x_hat) {
  if (x.frames.rows() != x_hat.frames.rows() || x.frames.cols() != x_hat.frames.cols()) {
    throw ShapeError("mpjpe: shapes differ");
  }
  if (x.frames.cols() < 2) throw ShapeError("mpjpe: needs two position channels");
  if (x.frames.rows() == 0) return 0;
  const Mat d = x.frames.leftCols(2) - x_hat.frames.leftCols(2);
  return d.rowwise().norm().mean();
}

std::vector<Real> jerk_magnitude(const MotionSequence& x) {
  const int T = x.length();
  std::vector<Real> out(static_cast<std::size_t>(T), std::numeric_limits<Real>::quiet_NaN());
  const Real f3 = x.fps * x.fps * x.fps;
  const auto p = [&](int t) { return x.frames.row(t).head<2>(); };
  for (int t = 2; t + 2 < T; ++t) {
    out[static_cast<std::size_t>(t)] = ((p(t + 2) - 2 * p(t + 1) + 2 * p(t - 1) - p(t - 2)) * (0.5 * f3)).norm();
  }
  return out;
}

TransitionEval jerk_metrics(const MotionSequence& x, int transition, int window) {
  if (window < 4) throw InputError("jerk_metrics: window must be >= 4");
  const int T = x.length();
  const int lo = transition - window / 2;
  const int hi = lo + window;
  if (lo < 2 || hi > T - 2) {
    throw InputError("jerk_metrics: window [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") leaves the defined jerk range [2, " + std::to_string(T - 2) + ")");
  }
  const auto j = jerk_magnitude(x);
  Real outside = 0;
  int n_out = 0;
  for (int t = 2; t < T - 2; ++t) {
    if (t < lo || t >= hi) {
      outside += j[static_cast<std::size_t>(t)];
      ++n_out;
    }
  }
  const Real baseline = n_out > 0 ? outside / n_out : 0.0;
  TransitionEval e{transition, window, 0, 0};
  for (int t = lo; t < hi; ++t) {
    const Real v = j[static_cast<std::size_t>(t)];
    e.pj = std::max(e.pj, v);
    e.auj += std::max<Real>(0, v - baseline) / x.fps;
  }
  return e;
}

Real causality_probe(const SequenceFn& fn, const Mat& input, int probe_frame, int stable_rows, int trials,
                     const RngKey& key) {
  if (probe_frame < 0 || probe_frame >= input.rows()) throw InputError("causality_probe: probe frame out of range");
  const Mat base = fn(input);
  if (stable_rows > base.rows()) throw InputError("causality_probe: more stable rows than outputs");
  const auto tail = static_cast<Eigen::Index>(input.rows() - probe_frame - 1);
  Real leak = 0;
  for (int trial = 0; trial < trials; ++trial) {
    Mat x = input;
    x.bottomRows(tail) += key.normal(DrawKind::probe, probe_frame, trial, tail, input.cols());
    const Mat y = fn(x);
    leak = std::max(leak, (y.topRows(stable_rows) - base.topRows(stable_rows)).cwiseAbs().maxCoeff());
  }
  return leak;
}

void parallel_for(int n, int threads, const std::function<void(int)>& job) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

ConsistencyResult consistency_eval(const sampler::Generator& gen, std::span<const data::ToyCaption> captions,
                                   const ConsistencyOptions& opt) {
  if (gen.vae == nullptr) throw InputError("consistency_eval: generator has no VAE to decode motion");
  if (opt.mode != "ar" && opt.mode != "fss") throw InputError("consistency_eval: unknown mode " + opt.mode);
  const int n = static_cast<int>(captions.size()) * opt.n_per_caption;
  ConsistencyResult r;
  r.target.resize(static_cast<std::size_t>(n));
  r.predicted.assign(static_cast<std::size_t>(n), -1);
  r.model_calls.resize(static_cast<std::size_t>(n));
  r.wall_time.resize(static_cast<std::size_t>(n));
  const RngKey root{opt.seed};
  const auto matrix = opt.mode == "fss" ? sampler::build_fss_matrix(gen.schedule.K, opt.L, opt.latent_frames)
                                        : sampler::ScheduleMatrix{};

  parallel_for(n, opt.threads, [&](int i) {
    const auto idx = static_cast<std::size_t>(i);
    const data::ToyCaption& cap = captions[idx / static_cast<std::size_t>(opt.n_per_caption)];
    const std::vector<TextCondition> track(static_cast<std::size_t>(opt.latent_frames), cap.condition());
    const RngKey key = root.derive(static_cast<std::uint64_t>(i));
    const auto rep = opt.mode == "ar" ? sampler::ar_generate(gen, opt.latent_frames, track, key)
                                      : sampler::fss_generate(gen, matrix, track, key);
    const auto pred = data::caption_oracle(rep.motion);
    r.target[idx] = cap.index();
    r.predicted[idx] = pred ? pred->index() : -1;
    r.model_calls[idx] = rep.model_calls;
    r.wall_time[idx] = rep.wall_time;
  });

  int hits = 0;
  for (int i = 0; i < n; ++i) hits += r.target[static_cast<std::size_t>(i)] == r.predicted[static_cast<std::size_t>(i)];
  r.accuracy = n > 0 ? static_cast<Real>(hits) / n : 0.0;
  return r;
}

MotionSequence hard_concatenation(const data::ToyCaption& first, const data::ToyCaption& second, int frames_each,
                                  double fps, double noise_std, std::uint64_t seed) {
  const RngKey key{seed};
  MotionSequence a = data::generate_trajectory(first, frames_each, fps, noise_std, key.derive(0).seed);
  MotionSequence b = data::generate_trajectory(second, frames_each, fps, noise_std, key.derive(1).seed);
  const Eigen::RowVector2d shift = a.frames.row(frames_each - 1).head<2>() - b.frames.row(0).head<2>();
  b.frames.leftCols(2).rowwise() += shift;
  MotionSequence out{Mat(2 * frames_each, a.dim()), fps};
  out.frames << a.frames, b.frames;
  return out;
}

}  // namespace cmdm::metrics
