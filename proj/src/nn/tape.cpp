#include "cmdm/nn/tape.hpp"

#include "cmdm/errors.hpp"

#include <cmath>
#include <memory>

namespace cmdm::nn {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Mat value) { return push(std::move(value), true, nullptr); }

Var Tape::param(const ParamTree& tree, const std::string& path) {
  auto it = param_ids_.find(path);
  if (it != param_ids_.end()) return Var{this, it->second};
  Node n;
  n.ref = &tree.at(path);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_ids_.emplace(path, id);
  params_.emplace_back(path, id);
  return Var{this, id};
}

Var Tape::push(Mat value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref ? *n.ref : n.own;
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ConfigError("backward: root belongs to another tape");
  const Mat& rv = value(root.id);
  if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward: root must be a scalar");
  if (!std::isfinite(rv(0, 0))) throw NumericalError("backward: non-finite loss");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root.id, Mat::Ones(1, 1));
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.has_grad) return n.grad;
  const Mat& val = value(v.id);
  return Mat::Zero(val.rows(), val.cols());
}

ParamTree Tape::param_grads() const {
  ParamTree out;
  for (const auto& [path, id] : params_) out.add(path, grad(Var{const_cast<Tape*>(this), id}));
  return out;
}

void Tape::accumulate_param_grads(ParamTree& into, Real s) const {
  for (const auto& [path, id] : params_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) continue;
    if (!into.contains(path)) into.set(path, Mat::Zero(n.grad.rows(), n.grad.cols()));
    into.at(path).noalias() += s * n.grad;
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ConfigError("ops: operands on different tapes");
  return *a.tape;
}

bool tracked(Var v) { return v.tape->requires_grad(v.id); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(matmul(a.value(), b.value()), tracked(a) || tracked(b), [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, g * t.value(b.id).transpose());
    if (t.requires_grad(b.id)) t.accumulate(b.id, t.value(a.id).transpose() * g);
  });
}

Var transpose(Var a) {
  return a.tape->push(transpose(a.value()), tracked(a), [a](Tape& t, const Mat& g) { t.accumulate(a.id, g.transpose()); });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(add(a.value(), b.value()), tracked(a) || tracked(b), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(sub(a.value(), b.value()), tracked(a) || tracked(b), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a.id, g);
    if (t.requires_grad(b.id)) t.accumulate(b.id, -g);
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(mul(a.value(), b.value()), tracked(a) || tracked(b), [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
    if (t.requires_grad(b.id)) t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
  });
}

Var scale(Var a, Real s) {
  return a.tape->push(scale(a.value(), s), tracked(a), [a, s](Tape& t, const Mat& g) { t.accumulate(a.id, g * s); });
}

Var add_scalar(Var a, Real s) {
  return a.tape->push(add_scalar(a.value(), s), tracked(a), [a](Tape& t, const Mat& g) { t.accumulate(a.id, g); });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  return t.push(add_row(a.value(), row.value()), tracked(a) || tracked(row), [a, row](Tape& t, const Mat& g) {
    t.accumulate(a.id, g);
    if (t.requires_grad(row.id)) t.accumulate(row.id, g.colwise().sum());
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var relu(Var x) {
  return x.tape->push(relu(x.value()), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, g.cwiseProduct(xv.unaryExpr([](Real v) { return v > 0 ? 1.0 : 0.0; })));
  });
}

Var silu(Var x) {
  return x.tape->push(silu(x.value()), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, g.cwiseProduct(xv.unaryExpr([](Real v) {
      const Real s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    })));
  });
}

Var gelu(Var x) {
  return x.tape->push(gelu(x.value()), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, g.cwiseProduct(xv.unaryExpr([](Real v) {
      constexpr Real c = 0.7978845608028654;
      const Real u = c * (v + 0.044715 * v * v * v);
      const Real th = std::tanh(u);
      const Real du = c * (1.0 + 3.0 * 0.044715 * v * v);
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    })));
  });
}

Var abs(Var x) {
  return x.tape->push(x.value().cwiseAbs(), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, g.cwiseProduct(xv.unaryExpr([](Real v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); })));
  });
}

Var square(Var x) {
  return x.tape->push(x.value().cwiseAbs2(), tracked(x), [x](Tape& t, const Mat& g) {
    t.accumulate(x.id, 2.0 * g.cwiseProduct(t.value(x.id)));
  });
}

Var exp(Var x) {
  return x.tape->push(x.value().array().exp().matrix(), tracked(x), [x](Tape& t, const Mat& g) {
    t.accumulate(x.id, g.cwiseProduct(t.value(x.id).array().exp().matrix()));
  });
}

Var layer_norm(Var x) {
  return x.tape->push(layer_norm(x.value()), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    const Real n = static_cast<Real>(xv.cols());
    Mat dx(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const Real mu = xv.row(r).sum() / n;
      const Real var = (xv.row(r).array() - mu).square().sum() / n;
      const Real inv = 1.0 / std::sqrt(var + kLayerNormEps);
      const RowVec xhat = (xv.row(r).array() - mu) * inv;
      const Real gmean = g.row(r).sum() / n;
      const Real gx = g.row(r).dot(xhat) / n;
      dx.row(r) = inv * (g.row(r).array() - gmean - xhat.array() * gx);
    }
    t.accumulate(x.id, dx);
  });
}

Var slice_cols(Var x, int start, int count) {
  return x.tape->push(slice_cols(x.value(), start, count), tracked(x), [x, start, count](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    Mat dx = Mat::Zero(xv.rows(), xv.cols());
    dx.middleCols(start, count) = g;
    t.accumulate(x.id, dx);
  });
}

Var slice_rows(Var x, int start, int count) {
  return x.tape->push(slice_rows(x.value(), start, count), tracked(x), [x, start, count](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    Mat dx = Mat::Zero(xv.rows(), xv.cols());
    dx.middleRows(start, count) = g;
    t.accumulate(x.id, dx);
  });
}

Var concat_rows(Var top, Var bottom) {
  Tape& t = same_tape(top, bottom);
  const auto top_rows = static_cast<int>(top.rows());
  return t.push(concat_rows(top.value(), bottom.value()), tracked(top) || tracked(bottom),
                [top, bottom, top_rows](Tape& t, const Mat& g) {
                  t.accumulate(top.id, g.topRows(top_rows));
                  t.accumulate(bottom.id, g.bottomRows(g.rows() - top_rows));
                });
}

Var gather_rows(Var table, std::span<const int> ids) {
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->push(gather_rows(table.value(), ids), tracked(table), [table, idv](Tape& t, const Mat& g) {
    const Mat& tv = t.value(table.id);
    Mat dt = Mat::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) dt.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table.id, dt);
  });
}

Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  auto probs = std::make_shared<std::vector<Mat>>();
  Mat out = attention(q.value(), k.value(), v.value(), heads, mask, probs.get());
  return t.push(std::move(out), tracked(q) || tracked(k) || tracked(v),
                [q, k, v, heads, mask, probs](Tape& t, const Mat& g) {
                  AttentionGrads ag = attention_backward(t.value(q.id), t.value(k.id), t.value(v.id), heads, mask, *probs, g);
                  t.accumulate(q.id, ag.dq);
                  t.accumulate(k.id, ag.dk);
                  t.accumulate(v.id, ag.dv);
                });
}

Var apply_rope(Var x, std::span<const int> positions, int head_dim) {
  std::vector<int> pos(positions.begin(), positions.end());
  return x.tape->push(apply_rope(x.value(), positions, head_dim), tracked(x), [x, pos, head_dim](Tape& t, const Mat& g) {
    t.accumulate(x.id, apply_rope(g, pos, head_dim, /*inverse=*/true));
  });
}

Var causal_im2col(Var x, int kernel, int stride, int segment) {
  return x.tape->push(causal_im2col(x.value(), kernel, stride, segment), tracked(x),
                      [x, kernel, stride, segment](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, causal_col2im(g, static_cast<int>(xv.rows()), static_cast<int>(xv.cols()), kernel, stride,
                                     segment));
  });
}

Var upsample_rows(Var x, int factor) {
  return x.tape->push(upsample_rows(x.value(), factor), tracked(x), [x, factor](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    Mat dx = Mat::Zero(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) dx.row(r / factor) += g.row(r);
    t.accumulate(x.id, dx);
  });
}

Var row_normalize(Var x) {
  const Mat& xv = x.value();
  ColVec norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0)) throw NumericalError("row_normalize: zero-norm row " + std::to_string(r));
  }
  Mat out = xv.array().colwise() / norms.array();
  return x.tape->push(std::move(out), tracked(x), [x, norms](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    Mat dx(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const RowVec u = xv.row(r) / norms(r);
      dx.row(r) = (g.row(r) - g.row(r).dot(u) * u) / norms(r);
    }
    t.accumulate(x.id, dx);
  });
}

Var row_sum(Var x) {
  return x.tape->push(x.value().rowwise().sum(), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    Mat dx = g.col(0).replicate(1, xv.cols());
    t.accumulate(x.id, dx);
  });
}

Var sum(Var x) {
  Mat s(1, 1);
  s(0, 0) = x.value().sum();
  return x.tape->push(std::move(s), tracked(x), [x](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, Mat::Constant(xv.rows(), xv.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  const Real n = static_cast<Real>(x.value().size());
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(x), 1.0 / n);
}

Var clamp(Var x, Real lo, Real hi) {
  return x.tape->push(x.value().cwiseMax(lo).cwiseMin(hi), tracked(x), [x, lo, hi](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x.id);
    t.accumulate(x.id, g.cwiseProduct(xv.unaryExpr([lo, hi](Real v) { return (v > lo && v < hi) ? 1.0 : 0.0; })));
  });
}

}  // namespace cmdm::nn
