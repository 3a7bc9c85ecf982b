#include "cmdm/align/align.hpp"

#include "cmdm/errors.hpp"
#include "cmdm/rng.hpp"
#include "cmdm/vae/mac_vae.hpp"

#include <algorithm>
#include <cmath>

namespace cmdm::align {

namespace {

constexpr int kTokenEmbedDim = 8;
constexpr int kMotionStats = 6;

void require_rows(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()) + " rows");
  }
}

Mat normalized_rows(const Mat& x, const char* op, const char* which) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real n = x.row(r).norm();
    if (!(n > 0)) throw NumericalError(std::string(op) + ": zero-norm row " + std::to_string(r) + " in " + which);
    out.row(r) = x.row(r) / n;
  }
  return out;
}

}  // namespace

void AlignConfig::validate() const {
  if (!(m1 >= 0 && m1 < 1)) throw ConfigError("vae.m1 must lie in [0, 1)");
  if (!(m2 >= 0 && m2 < 1)) throw ConfigError("vae.m2 must lie in [0, 1)");
  if (!(lambda_max > 0)) throw ConfigError("vae.lambda_max must be > 0");
  if (!(eps >= 0)) throw ConfigError("vae.lambda_eps must be >= 0");
  if (feature_dim < 1) throw ConfigError("vae.feature_dim must be >= 1");
}

Mat project_latents(const Mat& z, const Mat& w) {
  if (w.cols() != z.cols()) {
    throw ShapeError("project_latents: W has " + std::to_string(w.cols()) + " columns, latents have " +
                     std::to_string(z.cols()));
  }
  return z * w.transpose();
}

Real mcos_loss(const Mat& zp, const Mat& f, Real m1) {
  require_rows(zp, f, "mcos_loss");
  if (zp.cols() != f.cols()) throw ShapeError("mcos_loss: feature widths differ");
  if (zp.rows() == 0) return 0;
  const Mat a = normalized_rows(zp, "mcos_loss", "Zp");
  const Mat b = normalized_rows(f, "mcos_loss", "F");
  Real total = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) total += std::max(0.0, 1.0 - m1 - a.row(r).dot(b.row(r)));
  return total / static_cast<Real>(a.rows());
}

Real mdms_loss(const Mat& z, const Mat& f, Real m2) {
  require_rows(z, f, "mdms_loss");
  const Eigen::Index n = z.rows();
  if (n == 0) return 0;
  const Mat a = normalized_rows(z, "mdms_loss", "Z");
  const Mat b = normalized_rows(f, "mdms_loss", "F");
  const Mat cz = a * a.transpose();
  const Mat cf = b * b.transpose();
  Real total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) total += std::max(0.0, std::abs(cz(i, j) - cf(i, j)) - m2);
  }
  return total / static_cast<Real>(n * n);
}

Var project_latents(Var z, Var w) { return nn::matmul(z, nn::transpose(w)); }

Var mcos_loss(Var zp, const Mat& f, Real m1) {
  require_rows(zp.value(), f, "mcos_loss");
  const Mat fn = normalized_rows(f, "mcos_loss", "F");
  auto cos = nn::row_sum(nn::mul(nn::row_normalize(zp), zp.tape->constant(fn)));
  return nn::mean(nn::relu(nn::add_scalar(nn::scale(cos, -1.0), 1.0 - m1)));
}

Var mdms_loss(Var z, const Mat& f, Real m2) {
  require_rows(z.value(), f, "mdms_loss");
  const Mat fn = normalized_rows(f, "mdms_loss", "F");
  auto zn = nn::row_normalize(z);
  auto cz = nn::matmul(zn, nn::transpose(zn));
  auto gap = nn::abs(nn::sub(cz, z.tape->constant(fn * fn.transpose())));
  return nn::mean(nn::relu(nn::add_scalar(gap, -m2)));
}

Real adaptive_lambda(Real grad_rec_norm, Real grad_align_norm, const AlignConfig& cfg) {
  return std::min(cfg.lambda_max, grad_rec_norm / (grad_align_norm + cfg.eps));
}

Mat semantic_oracle(const MotionSequence& x, const TextCondition& caption, std::uint64_t seed, int feature_dim) {
  if (x.dim() < 4) throw ShapeError("semantic_oracle: expects (x, y, vx, vy) channels");
  if (x.length() < 1) throw InputError("semantic_oracle: empty motion");
  const Mat frames = vae::pad_to_multiple(x.frames);
  const Eigen::Index windows = frames.rows() / vae::kDownsample;
  const RngKey key{hash_combine(seed, hash_string("semantic_oracle"))};

  nn::RowVec text = nn::RowVec::Zero(kTokenEmbedDim);
  for (std::size_t slot = 0; slot < caption.tokens.size(); ++slot) {
    const RngKey tk = key.derive(hash_combine(static_cast<std::uint64_t>(caption.tokens[slot]), slot));
    text += tk.normal(DrawKind::weights, 0, 0, 1, kTokenEmbedDim);
  }
  const int in_dim = kMotionStats + kTokenEmbedDim;
  const Mat proj = key.derive(1).normal(DrawKind::weights, 0, 0, in_dim, feature_dim) / std::sqrt(Real(in_dim));

  Mat stats(windows, in_dim);
  for (Eigen::Index w = 0; w < windows; ++w) {
    const auto block = frames.middleRows(w * vae::kDownsample, vae::kDownsample);
    const nn::RowVec mean = block.colwise().mean();
    Real speed = 0;
    for (Eigen::Index r = 0; r < block.rows(); ++r) speed += block.row(r).segment(2, 2).norm();
    stats.row(w) << mean.segment(0, 4), speed / vae::kDownsample, 1.0, text;
  }
  return stats * proj;
}

}  // namespace cmdm::align
