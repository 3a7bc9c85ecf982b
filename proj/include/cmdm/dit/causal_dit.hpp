#pragma once

// Causal diffusion transformer. Each latent frame carries its own noise level;
// each layer runs AdaLN-modulated causal self-attention with ROPE, plain
// cross-attention to the caption tokens, and an AdaLN-modulated MLP.

#include "cmdm/motion.hpp"
#include "cmdm/nn/kernels.hpp"
#include "cmdm/nn/tape.hpp"
#include "cmdm/nn/types.hpp"
#include "cmdm/rng.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace cmdm::dit {

using nn::Mat;
using nn::ParamTree;
using nn::Real;
using nn::Tape;
using nn::Var;

struct DitConfig {
  int layers = 4;
  int heads = 4;
  int hidden = 128;
  int mlp_ratio = 2;
  int latent_dim = 16;
  int vocab = 7;         // last id is the null token
  int cond_length = 2;   // tokens per caption
  int max_level = 1000;  // conditioning levels are training-step indices 0..max_level

  void validate() const;
  int null_token() const { return vocab - 1; }
};

enum class DitInit {
  identity,  // zero gates and output layers: the model starts by predicting 0
  random,    // everything random; used where a non-trivial untrained model is needed
};

ParamTree init_dit(const DitConfig& cfg, const RngKey& key, DitInit mode);

TextCondition make_null_condition(const DitConfig& cfg);

/// True with probability p, from the drop stream at (sample, step).
bool drop_condition(const RngKey& rng, std::int64_t sample, std::int64_t step, Real p);

/// Full recompute over one sequence. levels[t] is the training-step index of frame t.
Mat dit_forward(const ParamTree& params, const DitConfig& cfg, const Mat& z_noisy, std::span<const int> levels,
                const TextCondition& cond);

/// As above with one caption per frame.
Mat dit_forward(const ParamTree& params, const DitConfig& cfg, const Mat& z_noisy, std::span<const int> levels,
                std::span<const TextCondition> frame_conds, const nn::AttentionMask& self_mask = {});

/// Batched training forward. z_batch stacks sequences of seq_len frames;
/// conds holds one caption per sequence.
Var dit_forward_graph(Tape& tape, const ParamTree& params, const DitConfig& cfg, const Mat& z_batch,
                      std::span<const int> levels, std::span<const TextCondition> conds, int seq_len);

/// The six per-frame modulation vectors of one layer, [shift1 scale1 gate1 shift2 scale2 gate2].
Mat adaln_modulation(const ParamTree& params, const DitConfig& cfg, int layer, std::span<const int> levels);

/// One transformer layer on hidden states h (frames 0..N-1, single caption).
Mat dit_block(const ParamTree& params, const DitConfig& cfg, int layer, const Mat& h, std::span<const int> levels,
              const TextCondition& cond);

/// Keys (after rotary encoding) and values of one self-attention layer.
struct LayerKV {
  Mat k, v;
};

/// Incremental inference with per-layer key/value caches of committed frames.
/// Frames must be committed in order; a forward covers a window that starts at
/// the first uncommitted frame.
class DitSession {
 public:
  /// horizon > 0 limits self-attention to that many most recent frames.
  DitSession(const ParamTree& params, const DitConfig& cfg, int horizon = 0);

  /// Predicts noise for frames [committed(), committed() + rows). frame_conds
  /// is indexed by absolute frame. Afterwards the first `commit` rows of the
  /// window join the cache; they must be final (clean) frames.
  Mat forward(const Mat& z_window, std::span<const int> levels, std::span<const TextCondition> frame_conds,
              int commit);

  int committed() const { return committed_; }
  long forwards() const { return forwards_; }

 private:
  const ParamTree& params_;
  DitConfig cfg_;
  int horizon_;
  int committed_ = 0;
  long forwards_ = 0;
  std::vector<LayerKV> cache_;
};

}  // namespace cmdm::dit
