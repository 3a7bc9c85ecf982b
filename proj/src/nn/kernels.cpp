#include "cmdm/nn/kernels.hpp"

#include "cmdm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmdm::nn {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

constexpr Real kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

int AttentionMask::first_key(int query_pos) const {
  int j0 = q_block > 0 ? (query_pos / q_block) * k_block : 0;
  if (horizon > 0) j0 = std::max(j0, query_pos - horizon + 1);
  return j0;
}

int AttentionMask::end_key(int query_pos, int num_keys) const {
  int j1 = q_block > 0 ? std::min(num_keys, (query_pos / q_block + 1) * k_block) : num_keys;
  if (causal) j1 = std::min(j1, query_pos + 1);
  return j1;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  }
  Mat out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

Mat transpose(const Mat& a) { return a.transpose(); }

Mat add(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "add");
  return a + b;
}

Mat sub(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "sub");
  return a - b;
}

Mat mul(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "mul");
  return a.cwiseProduct(b);
}

Mat scale(const Mat& a, Real s) { return a * s; }

Mat add_scalar(const Mat& a, Real s) { return a.array() + s; }

Mat add_row(const Mat& a, const Mat& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row must be 1 x cols");
  Mat out = a;
  out.rowwise() += row.row(0);
  return out;
}

Mat linear(const Mat& x, const Mat& w, const Mat& b) { return add_row(matmul(x, w), b); }

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat silu(const Mat& x) {
  return x.unaryExpr([](Real v) { return v / (1.0 + std::exp(-v)); });
}

Mat gelu(const Mat& x) {
  return x.unaryExpr([](Real v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Mat exp(const Mat& x) { return x.array().exp(); }

Mat clamp(const Mat& x, Real lo, Real hi) { return x.cwiseMax(lo).cwiseMin(hi); }

Mat layer_norm(const Mat& x) {
  Mat out(x.rows(), x.cols());
  const Real n = static_cast<Real>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real mu = x.row(r).sum() / n;
    const Real var = (x.row(r).array() - mu).square().sum() / n;
    const Real inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.row(r) = (x.row(r).array() - mu) * inv;
  }
  return out;
}

Mat slice_cols(const Mat& x, int start, int count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeError("slice_cols: out of range");
  return x.middleCols(start, count);
}

Mat slice_rows(const Mat& x, int start, int count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw ShapeError("slice_rows: out of range");
  return x.middleRows(start, count);
}

Mat concat_rows(const Mat& top, const Mat& bottom) {
  if (top.rows() == 0) return bottom;
  if (bottom.rows() == 0) return top;
  if (top.cols() != bottom.cols()) throw ShapeError("concat_rows: column mismatch");
  Mat out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

Mat gather_rows(const Mat& table, std::span<const int> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  return out;
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, int heads, const AttentionMask& mask,
              std::vector<Mat>* probs) {
  if (heads <= 0 || q.cols() % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(q.cols()) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention: q/k/v shape mismatch");
  }
  const int tq = static_cast<int>(q.rows());
  const int tk = static_cast<int>(k.rows());
  const int hd = static_cast<int>(q.cols()) / heads;
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(hd));

  Mat out = Mat::Zero(tq, q.cols());
  if (probs) probs->assign(static_cast<std::size_t>(heads), Mat::Zero(tq, tk));
  std::vector<Real> s(static_cast<std::size_t>(tk));
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    for (int i = 0; i < tq; ++i) {
      const int pos = mask.q_offset + i;
      const int j0 = mask.first_key(pos);
      const int j1 = mask.end_key(pos, tk);
      if (j1 <= j0) throw InputError("attention: query row sees no keys");
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = j0; j < j1; ++j) {
        Real dot = 0;
        for (int c = 0; c < hd; ++c) dot += q(i, off + c) * k(j, off + c);
        s[static_cast<std::size_t>(j)] = dot * inv_sqrt;
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      Real denom = 0;
      for (int j = j0; j < j1; ++j) {
        s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx);
        denom += s[static_cast<std::size_t>(j)];
      }
      for (int j = j0; j < j1; ++j) {
        const Real p = s[static_cast<std::size_t>(j)] / denom;
        if (probs) (*probs)[static_cast<std::size_t>(h)](i, j) = p;
        for (int c = 0; c < hd; ++c) out(i, off + c) += p * v(j, off + c);
      }
    }
  }
  return out;
}

AttentionGrads attention_backward(const Mat& q, const Mat& k, const Mat& v, int heads,
                                  const AttentionMask& mask, const std::vector<Mat>& probs,
                                  const Mat& dout) {
  const int tq = static_cast<int>(q.rows());
  const int tk = static_cast<int>(k.rows());
  const int hd = static_cast<int>(q.cols()) / heads;
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(hd));
  AttentionGrads g{Mat::Zero(q.rows(), q.cols()), Mat::Zero(k.rows(), k.cols()),
                   Mat::Zero(v.rows(), v.cols())};
  std::vector<Real> dp(static_cast<std::size_t>(tk));
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    const Mat& p = probs[static_cast<std::size_t>(h)];
    for (int i = 0; i < tq; ++i) {
      const int pos = mask.q_offset + i;
      const int j0 = mask.first_key(pos);
      const int j1 = mask.end_key(pos, tk);
      Real weighted = 0;
      for (int j = j0; j < j1; ++j) {
        Real d = 0;
        for (int c = 0; c < hd; ++c) {
          d += dout(i, off + c) * v(j, off + c);
          g.dv(j, off + c) += p(i, j) * dout(i, off + c);
        }
        dp[static_cast<std::size_t>(j)] = d;
        weighted += p(i, j) * d;
      }
      for (int j = j0; j < j1; ++j) {
        const Real ds = p(i, j) * (dp[static_cast<std::size_t>(j)] - weighted) * inv_sqrt;
        for (int c = 0; c < hd; ++c) {
          g.dq(i, off + c) += ds * k(j, off + c);
          g.dk(j, off + c) += ds * q(i, off + c);
        }
      }
    }
  }
  return g;
}

SeqTensor causal_attention(const SeqTensor& q, const SeqTensor& k, const SeqTensor& v, int heads) {
  if (q.rows() != k.rows()) throw ShapeError("causal_attention: q and k lengths differ");
  return attention(q, k, v, heads, AttentionMask{});
}

SeqTensor apply_rope(const SeqTensor& x, std::span<const int> positions, int head_dim, bool inverse) {
  const int dim = static_cast<int>(x.cols());
  const int hd = head_dim == 0 ? dim : head_dim;
  if (hd <= 0 || hd % 2 != 0) throw ConfigError("apply_rope: rotary block dim must be even, got " + std::to_string(hd));
  if (dim % hd != 0) throw ConfigError("apply_rope: dim not divisible by rotary block dim");
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) throw ShapeError("apply_rope: positions length mismatch");
  const int half = hd / 2;
  std::vector<Real> freq(static_cast<std::size_t>(half));
  for (int i = 0; i < half; ++i) {
    freq[static_cast<std::size_t>(i)] = std::pow(kRopeBase, -2.0 * i / static_cast<Real>(hd));
  }
  const Real sign = inverse ? -1.0 : 1.0;
  SeqTensor out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real pos = static_cast<Real>(positions[static_cast<std::size_t>(r)]);
    for (int i = 0; i < half; ++i) {
      const Real angle = pos * freq[static_cast<std::size_t>(i)];
      const Real c = std::cos(angle);
      const Real s = sign * std::sin(angle);
      for (int b = 0; b < dim; b += hd) {
        const Real x0 = x(r, b + 2 * i);
        const Real x1 = x(r, b + 2 * i + 1);
        out(r, b + 2 * i) = x0 * c - x1 * s;
        out(r, b + 2 * i + 1) = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

Mat causal_im2col(const Mat& x, int kernel, int stride, int segment) {
  if (kernel < 1 || stride < 1) throw ConfigError("causal_im2col: kernel and stride must be positive");
  const Eigen::Index seg = segment > 0 ? segment : x.rows();
  if (seg % stride != 0 || (seg > 0 && x.rows() % seg != 0)) {
    throw ShapeError("causal_im2col: length not a multiple of stride");
  }
  const Eigen::Index c = x.cols();
  const Eigen::Index out_rows = x.rows() / stride;
  const Eigen::Index out_seg = seg / stride;
  Mat cols = Mat::Zero(out_rows, kernel * c);
  for (Eigen::Index j = 0; j < out_rows; ++j) {
    const Eigen::Index base = (j / out_seg) * seg;
    const Eigen::Index end = (j % out_seg) * stride + stride - 1;
    for (int tap = 0; tap < kernel; ++tap) {
      const Eigen::Index src = end - (kernel - 1) + tap;
      if (src >= 0) cols.block(j, tap * c, 1, c) = x.row(base + src);
    }
  }
  return cols;
}

Mat causal_col2im(const Mat& cols, int in_rows, int channels, int kernel, int stride, int segment) {
  Mat x = Mat::Zero(in_rows, channels);
  const Eigen::Index seg = segment > 0 ? segment : in_rows;
  const Eigen::Index out_seg = seg / stride;
  for (Eigen::Index j = 0; j < cols.rows(); ++j) {
    const Eigen::Index base = (j / out_seg) * seg;
    const Eigen::Index end = (j % out_seg) * stride + stride - 1;
    for (int tap = 0; tap < kernel; ++tap) {
      const Eigen::Index src = end - (kernel - 1) + tap;
      if (src >= 0) x.row(base + src) += cols.block(j, tap * channels, 1, channels);
    }
  }
  return x;
}

Mat upsample_rows(const Mat& x, int factor) {
  Mat out(x.rows() * factor, x.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = x.row(r / factor);
  return out;
}

Mat timestep_embedding(std::span<const int> levels, int dim) {
  const int half = dim / 2;
  Mat out = Mat::Zero(static_cast<Eigen::Index>(levels.size()), dim);
  for (std::size_t r = 0; r < levels.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const Real f = std::exp(-std::log(10000.0) * i / static_cast<Real>(half));
      const Real a = static_cast<Real>(levels[r]) * f;
      out(static_cast<Eigen::Index>(r), i) = std::cos(a);
      out(static_cast<Eigen::Index>(r), half + i) = std::sin(a);
    }
  }
  return out;
}

}  // namespace cmdm::nn
