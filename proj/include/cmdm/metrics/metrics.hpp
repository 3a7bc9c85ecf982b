#pragma once

// Reconstruction error, transition smoothness, causality probing and
// caption consistency of generated motion.

#include "cmdm/data/toy_motion.hpp"
#include "cmdm/motion.hpp"
#include "cmdm/rng.hpp"
#include "cmdm/sampler/sampler.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cmdm::metrics {

using nn::Mat;
using nn::Real;

/// Mean over frames of the Euclidean distance between position channels (x, y).
Real mpjpe(const MotionSequence& x, const MotionSequence& x_hat);

/// |jerk| per frame: (p[t+2] - 2p[t+1] + 2p[t-1] - p[t-2]) / 2 * fps^3 on positions.
/// Entries for the first two and last two frames are NaN (undefined).
std::vector<Real> jerk_magnitude(const MotionSequence& x);

struct TransitionEval {
  int transition = 0;
  int window = 0;
  Real pj = 0;
  Real auj = 0;
};

/// Window covers frames [transition - window/2, transition - window/2 + window).
/// PJ is the max |jerk| inside; AUJ sums max(0, |jerk| - baseline) / fps inside,
/// with baseline the mean |jerk| over defined frames outside the window.
/// Throws InputError if the window leaves the frames where jerk is defined.
TransitionEval jerk_metrics(const MotionSequence& x, int transition, int window);

using SequenceFn = std::function<Mat(const Mat&)>;

/// Perturbs input rows after probe_frame with N(0,1) deltas and returns the max
/// absolute change over the first stable_rows output rows, across trials.
Real causality_probe(const SequenceFn& fn, const Mat& input, int probe_frame, int stable_rows, int trials,
                     const RngKey& key);

/// Fraction of generated motions the caption oracle assigns to their caption.
struct ConsistencyResult {
  Real accuracy = 0;
  std::vector<int> target;     // caption index per sample
  std::vector<int> predicted;  // -1 when unclassifiable
  std::vector<long> model_calls;
  std::vector<double> wall_time;
};

struct ConsistencyOptions {
  int n_per_caption = 16;
  int latent_frames = 16;
  std::string mode = "fss";  // "ar" or "fss"
  int L = 2;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Needs gen.vae set. Sample s of caption c uses key derive(c * n + s).
ConsistencyResult consistency_eval(const sampler::Generator& gen, std::span<const data::ToyCaption> captions,
                                   const ConsistencyOptions& opt);

/// Runs job(i) for i in [0, n) on up to `threads` workers; exceptions propagate.
void parallel_for(int n, int threads, const std::function<void(int)>& job);

/// Reference clip for `first` followed by one for `second`, the second translated
/// so its first position equals the first clip's last position.
MotionSequence hard_concatenation(const data::ToyCaption& first, const data::ToyCaption& second, int frames_each,
                                  double fps, double noise_std, std::uint64_t seed);

}  // namespace cmdm::metrics
