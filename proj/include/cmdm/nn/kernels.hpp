#pragma once

// Dense forward kernels on plain matrices. The autograd ops in tape.hpp wrap
// these, so inference and training share one arithmetic path.

#include "cmdm/nn/types.hpp"

#include <span>
#include <vector>

namespace cmdm::nn {

/// Which keys a query row may see. Query row i sits at absolute position
/// q_offset + i; key row j sits at absolute position j.
struct AttentionMask {
  bool causal = true;
  int q_offset = 0;
  // Keys older than horizon positions are hidden; 0 means unlimited.
  int horizon = 0;
  // Batched sequences stacked along rows: query block (pos / q_block) only sees
  // key rows of the same block index (j / k_block). 0 disables blocking.
  int q_block = 0;
  int k_block = 0;

  int first_key(int query_pos) const;
  int end_key(int query_pos, int num_keys) const;
};

constexpr Real kLayerNormEps = 1e-6;
constexpr Real kRopeBase = 10000.0;

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat mul(const Mat& a, const Mat& b);
Mat scale(const Mat& a, Real s);
Mat add_scalar(const Mat& a, Real s);
/// a + broadcast(row) over rows.
Mat add_row(const Mat& a, const Mat& row);
Mat linear(const Mat& x, const Mat& w, const Mat& b);
Mat relu(const Mat& x);
Mat silu(const Mat& x);
Mat gelu(const Mat& x);
Mat exp(const Mat& x);
Mat clamp(const Mat& x, Real lo, Real hi);
/// Per-row normalisation without affine parameters.
Mat layer_norm(const Mat& x);
Mat slice_cols(const Mat& x, int start, int count);
Mat slice_rows(const Mat& x, int start, int count);
Mat concat_rows(const Mat& top, const Mat& bottom);
Mat gather_rows(const Mat& table, std::span<const int> ids);

/// Multi-head scaled dot-product attention. Heads split the feature dim into
/// contiguous blocks; scores are scaled by 1/sqrt(dim/heads).
/// If probs is non-null it receives one (Tq x Tk) probability matrix per head.
Mat attention(const Mat& q, const Mat& k, const Mat& v, int heads, const AttentionMask& mask,
              std::vector<Mat>* probs = nullptr);

struct AttentionGrads {
  Mat dq, dk, dv;
};
AttentionGrads attention_backward(const Mat& q, const Mat& k, const Mat& v, int heads,
                                  const AttentionMask& mask, const std::vector<Mat>& probs,
                                  const Mat& dout);

/// Causal attention over one sequence (q, k, v share length and positions).
SeqTensor causal_attention(const SeqTensor& q, const SeqTensor& k, const SeqTensor& v, int heads);

/// Rotary position encoding applied independently inside each head_dim block
/// (head_dim = 0 means the whole row is one block). Pairs (2i, 2i+1) are rotated
/// by position * base^(-2i/head_dim). inverse=true applies the transpose rotation.
SeqTensor apply_rope(const SeqTensor& x, std::span<const int> positions, int head_dim = 0,
                     bool inverse = false);

/// Causal im2col: output row j gathers input rows e-kernel+1..e with
/// e = j*stride + stride-1, zero for negative indices. Input length must be a
/// multiple of stride. Columns are ordered [tap0 channels, tap1 channels, ...].
/// segment > 0 treats x as independent sequences of that many rows stacked
/// together; padding restarts at each segment.
Mat causal_im2col(const Mat& x, int kernel, int stride, int segment = 0);
Mat causal_col2im(const Mat& cols, int in_rows, int channels, int kernel, int stride, int segment = 0);

/// Repeats every row factor times (nearest-neighbour upsampling in time).
Mat upsample_rows(const Mat& x, int factor);

/// Sinusoidal embedding of integer levels, one row per level: [cos(k f_i) | sin(k f_i)].
Mat timestep_embedding(std::span<const int> levels, int dim);

}  // namespace cmdm::nn
