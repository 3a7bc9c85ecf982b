#pragma once

// Reverse-mode differentiation over matrix-valued nodes. A Tape records every
// op applied during one forward pass; backward() walks it in reverse. Each op
// carries its own analytic gradient.

#include "cmdm/nn/kernels.hpp"
#include "cmdm/nn/types.hpp"

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmdm::nn {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Real scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Mat& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Untracked value.
  Var constant(Mat value);
  /// Tracked leaf that is not a parameter (for gradients w.r.t. inputs).
  Var input(Mat value);
  /// Tracked parameter leaf; references the tree's storage, which must outlive the tape.
  Var param(const ParamTree& tree, const std::string& path);

  Var push(Mat value, bool requires_grad, BackwardFn fn);

  const Mat& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Adds g into the gradient slot of node id (no-op for untracked nodes).
  void accumulate(int id, const Mat& g);

  /// Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var root);
  /// Gradient of a node after backward(); zero matrix if nothing flowed into it.
  Mat grad(Var v) const;
  /// Gradients of all parameters touched by this tape, keyed by path.
  ParamTree param_grads() const;
  /// into[path] += scale * grad(path) for every parameter on this tape.
  void accumulate_param_grads(ParamTree& into, Real scale = 1.0) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat own;
    const Mat* ref = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
  std::vector<std::pair<std::string, int>> params_;
};

// Ops mirroring kernels.hpp. All operands must live on the same tape.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
Var add_scalar(Var a, Real s);
Var add_row(Var a, Var row);
Var linear(Var x, Var w, Var b);
Var relu(Var x);
Var silu(Var x);
Var gelu(Var x);
Var abs(Var x);
Var square(Var x);
Var exp(Var x);
Var layer_norm(Var x);
Var slice_cols(Var x, int start, int count);
Var slice_rows(Var x, int start, int count);
Var concat_rows(Var top, Var bottom);
Var gather_rows(Var table, std::span<const int> ids);
Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask);
Var apply_rope(Var x, std::span<const int> positions, int head_dim = 0);
Var causal_im2col(Var x, int kernel, int stride, int segment = 0);
Var upsample_rows(Var x, int factor);
/// Each row divided by its Euclidean norm; zero rows raise NumericalError.
Var row_normalize(Var x);
/// Per-row sum, (T x 1).
Var row_sum(Var x);
Var sum(Var x);
Var mean(Var x);
/// Elementwise clamp; gradient passes only strictly inside (lo, hi).
Var clamp(Var x, Real lo, Real hi);

}  // namespace cmdm::nn
