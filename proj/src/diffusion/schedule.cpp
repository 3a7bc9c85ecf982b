#include "cmdm/diffusion/schedule.hpp"

#include "cmdm/errors.hpp"

#include <cmath>
#include <numbers>

namespace cmdm::diffusion {

namespace {

constexpr Real kCosineOffset = 0.008;
constexpr Real kMaxBeta = 0.999;

DiffusionSchedule from_betas(const std::vector<Real>& beta) {
  DiffusionSchedule s;
  s.K = static_cast<int>(beta.size()) - 1;
  s.alpha.assign(beta.size(), 1.0);
  s.alpha_bar.assign(beta.size(), 1.0);
  s.sigma.assign(beta.size(), 0.0);
  s.train_index.resize(beta.size());
  for (int k = 0; k <= s.K; ++k) s.train_index[static_cast<std::size_t>(k)] = k;
  for (int k = 1; k <= s.K; ++k) {
    const auto i = static_cast<std::size_t>(k);
    s.alpha[i] = 1.0 - beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    s.sigma[i] = k == 1 ? 0.0 : std::sqrt(beta[i]);
  }
  return s;
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

void DiffusionSchedule::validate() const {
  const auto n = static_cast<std::size_t>(K) + 1;
  if (K < 1 || alpha.size() != n || alpha_bar.size() != n || sigma.size() != n || train_index.size() != n) {
    throw ConfigError("schedule: arrays must hold K + 1 entries");
  }
  if (alpha_bar[0] != 1.0) throw ConfigError("schedule: alpha_bar[0] must be 1");
  for (std::size_t k = 1; k < n; ++k) {
    if (!(alpha[k] > 0 && alpha[k] < 1)) throw ConfigError("schedule: alpha out of (0, 1) at k=" + std::to_string(k));
    if (!(alpha_bar[k] < alpha_bar[k - 1])) {
      throw ConfigError("schedule: alpha_bar not strictly decreasing at k=" + std::to_string(k));
    }
    if (!(sigma[k] >= 0)) throw ConfigError("schedule: negative sigma at k=" + std::to_string(k));
  }
  if (sigma[1] != 0.0) throw ConfigError("schedule: sigma at the final step must be 0");
}

DiffusionSchedule build_schedule(int K, ScheduleKind kind) {
  if (K < 1) throw ConfigError("build_schedule: K must be >= 1, got " + std::to_string(K));
  std::vector<Real> beta(static_cast<std::size_t>(K) + 1, 0.0);
  if (kind == ScheduleKind::linear) {
    for (int k = 1; k <= K; ++k) {
      const Real frac = K == 1 ? 0.0 : static_cast<Real>(k - 1) / (K - 1);
      beta[static_cast<std::size_t>(k)] = kBetaStart + frac * (kBetaEnd - kBetaStart);
    }
  } else {
    auto f = [K](int k) {
      const Real x = (static_cast<Real>(k) / K + kCosineOffset) / (1.0 + kCosineOffset);
      const Real c = std::cos(x * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int k = 1; k <= K; ++k) {
      beta[static_cast<std::size_t>(k)] = std::min(kMaxBeta, 1.0 - f(k) / f(k - 1));
    }
  }
  DiffusionSchedule s = from_betas(beta);
  s.validate();
  return s;
}

DiffusionSchedule subsample_schedule(const DiffusionSchedule& s, int K_infer) {
  if (K_infer < 1 || K_infer > s.K) {
    throw ConfigError("subsample_schedule: K_infer must lie in [1, " + std::to_string(s.K) + "], got " +
                      std::to_string(K_infer));
  }
  std::vector<int> keep(static_cast<std::size_t>(K_infer) + 1);
  for (int j = 0; j <= K_infer; ++j) {
    keep[static_cast<std::size_t>(j)] =
        static_cast<int>(std::lround(static_cast<Real>(j) * s.K / static_cast<Real>(K_infer)));
  }
  std::vector<Real> beta(keep.size(), 0.0);
  for (std::size_t j = 1; j < keep.size(); ++j) {
    beta[j] = 1.0 - s.alpha_bar[static_cast<std::size_t>(keep[j])] / s.alpha_bar[static_cast<std::size_t>(keep[j - 1])];
  }
  DiffusionSchedule out = from_betas(beta);
  for (std::size_t j = 0; j < keep.size(); ++j) {
    out.alpha_bar[j] = s.alpha_bar[static_cast<std::size_t>(keep[j])];
    out.train_index[j] = s.train_index[static_cast<std::size_t>(keep[j])];
  }
  out.validate();
  return out;
}

Diffused forward_diffuse(const Mat& z, std::span<const int> levels, const DiffusionSchedule& s, const RngKey& rng) {
  if (static_cast<Eigen::Index>(levels.size()) != z.rows()) throw ShapeError("forward_diffuse: one level per frame");
  Diffused out{Mat(z.rows(), z.cols()), Mat(z.rows(), z.cols())};
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    const int k = levels[static_cast<std::size_t>(t)];
    if (k < 0 || k > s.K) throw InputError("forward_diffuse: level " + std::to_string(k) + " outside [0, K]");
    const Real ab = s.alpha_bar[static_cast<std::size_t>(k)];
    out.eps.row(t) = rng.normal(DrawKind::diffuse, t, k, 1, z.cols());
    out.z_tilde.row(t) = std::sqrt(ab) * z.row(t) + std::sqrt(1.0 - ab) * out.eps.row(t);
  }
  return out;
}

Mat reverse_step_with(const Mat& z_k, const Mat& eps_hat, int k, const DiffusionSchedule& s, const Mat& w) {
  if (k < 1 || k > s.K) throw InputError("reverse_step: level " + std::to_string(k) + " outside [1, K]");
  if (z_k.rows() != eps_hat.rows() || z_k.cols() != eps_hat.cols() || w.rows() != z_k.rows() ||
      w.cols() != z_k.cols()) {
    throw ShapeError("reverse_step: shape mismatch");
  }
  const auto i = static_cast<std::size_t>(k);
  const Real a = s.alpha[i];
  const Real coef = (1.0 - a) / std::sqrt(1.0 - s.alpha_bar[i]);
  return (z_k - coef * eps_hat) / std::sqrt(a) + s.sigma[i] * w;
}

Mat reverse_step(const Mat& z_k, const Mat& eps_hat, int k, const DiffusionSchedule& s, const RngKey& rng, int frame) {
  return reverse_step_with(z_k, eps_hat, k, s, rng.normal(DrawKind::ancestral, frame, k, z_k.rows(), z_k.cols()));
}

Mat cfg_combine(const Mat& eps_cond, const Mat& eps_uncond, Real scale) {
  if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols()) {
    throw ShapeError("cfg_combine: shape mismatch");
  }
  return eps_uncond + scale * (eps_cond - eps_uncond);
}

}  // namespace cmdm::diffusion
