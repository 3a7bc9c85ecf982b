#include "doctest.h"

#include "cmdm/align/align.hpp"
#include "cmdm/errors.hpp"
#include "cmdm/nn/grad_check.hpp"
#include "cmdm/vae/mac_vae.hpp"
#include "test_util.hpp"

#include <cmath>
#include <deque>

using namespace cmdm;
using namespace cmdm::nn;
using cmdm::test::random_mat;

namespace {

vae::VaeModel small_vae(std::uint64_t seed, int channels = 8, int latent = 3) {
  vae::VaeConfig cfg;
  cfg.channels = channels;
  cfg.latent_dim = latent;
  // Random biases so the zero-bias init does not hide bias wiring.
  ParamTree p = vae::init_vae(cfg, RngKey{seed});
  int i = 0;
  for (auto& [path, m] : p) {
    if (path.size() > 2 && path.substr(path.size() - 2) == ".b") m = random_mat(seed + 100 + i++, m.rows(), m.cols(), 0.1);
  }
  return {cfg, p};
}

MotionSequence random_motion(std::uint64_t seed, int frames) { return {random_mat(seed, frames, 4), 20.0}; }

}  // namespace

TEST_CASE("encode: latent length is ceil(T/4)") {
  const auto m = small_vae(1);
  CHECK(vae::encode(random_motion(2, 16), m).mu.rows() == 4);
  CHECK(vae::encode(random_motion(3, 17), m).mu.rows() == 5);
  CHECK(vae::encode(random_motion(4, 4), m).mu.rows() == 1);
  CHECK_THROWS_AS(vae::encode(random_motion(5, 3), m), InputError);
}

TEST_CASE("encode: zero input with zero biases is finite") {
  vae::VaeConfig cfg;
  const vae::VaeModel m{cfg, vae::init_vae(cfg, RngKey{9})};
  const auto d = vae::encode({Mat::Zero(16, 4), 20.0}, m);
  CHECK(d.mu.rows() == 4);
  CHECK(d.mu.cols() == cfg.latent_dim);
  CHECK(d.mu.allFinite());
}

TEST_CASE("encode: latent step u ignores frames after its window") {
  const auto m = small_vae(6);
  const auto x = random_motion(7, 16);
  const auto base = vae::encode(x, m);
  // Perturb frames 13..16 (1-based): latent steps 1..3 (1-based) are unchanged.
  auto y = x;
  y.frames.bottomRows(4) += random_mat(8, 4, 4);
  const auto pert = vae::encode(y, m);
  CHECK(base.mu.topRows(3) == pert.mu.topRows(3));
  CHECK(base.logvar.topRows(3) == pert.logvar.topRows(3));
  CHECK(base.mu.row(3) != pert.mu.row(3));
  // Matches recomputation on the truncated prefix.
  const auto prefix = vae::encode({x.frames.topRows(12), 20.0}, m);
  CHECK(test::max_abs_diff(prefix.mu, base.mu.topRows(3)) <= 1e-14);
}

TEST_CASE("decode: output frame t depends only on latent steps up to its window") {
  const auto m = small_vae(10);
  const Mat z = random_mat(11, 4, 3);
  const auto base = vae::decode(z, m);
  CHECK(base.length() == 16);
  Mat z2 = z;
  z2.row(2) += random_mat(12, 1, 3).row(0);
  const auto pert = vae::decode(z2, m);
  CHECK(base.frames.topRows(8) == pert.frames.topRows(8));
  CHECK(base.frames.row(8) != pert.frames.row(8));
}

TEST_CASE("reparameterize: zero noise, vanishing std and shape checks") {
  vae::LatentDistribution d{random_mat(1, 3, 2), random_mat(2, 3, 2), 12};
  CHECK(vae::reparameterize(d, Mat::Zero(3, 2)) == d.mu);
  d.logvar.setConstant(vae::kLogvarMin);
  CHECK(test::max_abs_diff(vae::reparameterize(d, random_mat(3, 3, 2)), d.mu) < 1e-6);
  CHECK_THROWS_AS(vae::reparameterize(d, Mat::Zero(2, 2)), ShapeError);
}

TEST_CASE("reparameterize: sample statistics over 1e5 draws") {
  vae::LatentDistribution d{Mat(1, 1), Mat(1, 1), 4};
  d.mu(0, 0) = 0.7;
  d.logvar(0, 0) = std::log(0.25);
  const int n = 100000;
  const Mat noise = RngKey{5}.normal(DrawKind::reparam, 0, 0, n, 1);
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    vae::LatentDistribution one = d;
    const double z = vae::reparameterize(one, noise.row(i))(0, 0);
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  // Standard errors: sd/sqrt(n) for the mean, var*sqrt(2/n) for the variance.
  CHECK(std::abs(mean - 0.7) < 3 * 0.5 / std::sqrt(n));
  CHECK(std::abs(var - 0.25) < 3 * 0.25 * std::sqrt(2.0 / n));
}

TEST_CASE("vae_loss: value matches its parts and gradient checks") {
  const auto m = small_vae(20, 4, 2);
  const Mat x = random_mat(21, 2 * 8, 4);
  const Mat noise = random_mat(22, 2 * 2, 2);
  const Real beta = 0.5;
  // The tape references parameters, so each model must outlive its tape.
  std::deque<vae::VaeModel> alive;
  const LossFn fn = [&](Tape& tape, const ParamTree& p) {
    const vae::VaeModel& mm = alive.emplace_back(vae::VaeModel{m.config, p});
    auto enc = vae::encode_graph(tape, mm, x, 8);
    auto z = add(enc.mu, mul(exp(scale(enc.logvar, 0.5)), tape.constant(noise)));
    return vae::vae_loss_graph(vae::decode_graph(tape, mm, z, 2), x, enc.mu, enc.logvar, beta);
  };
  const auto rep = grad_check_report(fn, m.params, 1e-5, 6);
  CHECK(rep.max_rel_err <= 1e-4);

  const auto d = vae::encode({x.topRows(8), 20.0}, m);
  const Mat x_hat = vae::decode(d.mu, m).frames;
  const auto l = vae::vae_loss(x.topRows(8), x_hat, d, beta);
  CHECK(l.total == doctest::Approx(l.rec + beta * l.kl).epsilon(1e-12));
  CHECK(vae::kl_divergence(Mat::Zero(2, 3), Mat::Zero(2, 3)) == 0.0);
}

TEST_CASE("project_latents: identity, zero and matmul oracle") {
  const Mat z = random_mat(1, 5, 4);
  CHECK(align::project_latents(z, Mat::Identity(4, 4)) == z);
  CHECK(align::project_latents(z, Mat::Zero(6, 4)).isZero());
  const Mat w = random_mat(2, 6, 4);
  Mat oracle(5, 6);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += z(i, k) * w(j, k);
      oracle(i, j) = s;
    }
  CHECK(test::max_abs_diff(align::project_latents(z, w), oracle) <= 1e-10);
  CHECK_THROWS_AS(align::project_latents(z, Mat::Zero(6, 3)), ShapeError);
}

TEST_CASE("mcos_loss anchors") {
  const Mat f = random_mat(3, 4, 8);
  CHECK(align::mcos_loss(f, f, 0.5) == doctest::Approx(0.0).epsilon(1e-12));
  Mat a(2, 2), b(2, 2);
  a << 1, 0, 0, 2;
  b << 0, 3, -1, 0;
  CHECK(std::abs(align::mcos_loss(a, b, 0.5) - 0.5) <= 1e-9);
  CHECK(std::abs(align::mcos_loss(a, -a, 0.5) - 1.5) <= 1e-9);
  Mat zero = a;
  zero.row(1).setZero();
  CHECK_THROWS_AS(align::mcos_loss(zero, b, 0.5), NumericalError);
}

TEST_CASE("mdms_loss anchors") {
  const Mat f = random_mat(4, 5, 6);
  CHECK(align::mdms_loss(f, f, 0.25) == 0.0);
  Mat z(2, 3), g(2, 3);
  z << 1, 2, 3, 2, 4, 6;  // cos = 1
  g << 1, 0, 0, 0, 5, 0;  // cos = 0
  CHECK(std::abs(align::mdms_loss(z, g, 0.25) - 0.375) <= 1e-9);
  CHECK(align::mdms_loss(random_mat(5, 4, 3), random_mat(6, 4, 7), 2.0) == 0.0);
}

TEST_CASE("alignment losses are invariant to positive row scaling and non-negative") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Mat z = random_mat(100 + s, 6, 5), f = random_mat(200 + s, 6, 5);
    const Mat scales = random_mat(300 + s, 6, 1).cwiseAbs().array() + 0.1;
    const Mat zs = z.array().colwise() * scales.col(0).array();
    CHECK(align::mcos_loss(zs, f, 0.5) == doctest::Approx(align::mcos_loss(z, f, 0.5)).epsilon(1e-12));
    CHECK(align::mdms_loss(zs, f, 0.25) == doctest::Approx(align::mdms_loss(z, f, 0.25)).epsilon(1e-12));
    CHECK(align::mcos_loss(z, f, 0.5) >= 0);
    CHECK(align::mdms_loss(z, f, 0.25) >= 0);
  }
}

TEST_CASE("alignment loss gradients away from relu kinks") {
  int checked = 0;
  for (std::uint64_t s = 0; checked < 20 && s < 200; ++s) {
    ParamTree p;
    p.add("z", random_mat(400 + s, 4, 8));
    const Mat f = random_mat(500 + s, 4, 8);
    // Skip instances with a hinge argument within 1e-3 of zero.
    bool near_kink = false;
    const Mat& z = p.at("z");
    for (int i = 0; i < 4; ++i) {
      const double c = z.row(i).dot(f.row(i)) / (z.row(i).norm() * f.row(i).norm());
      near_kink |= std::abs(1 - 0.5 - c) < 1e-3;
      for (int j = 0; j < 4; ++j) {
        const double cz = z.row(i).dot(z.row(j)) / (z.row(i).norm() * z.row(j).norm());
        const double cf = f.row(i).dot(f.row(j)) / (f.row(i).norm() * f.row(j).norm());
        near_kink |= i != j && std::abs(std::abs(cz - cf) - 0.25) < 1e-3;
      }
    }
    if (near_kink) continue;
    ++checked;
    CHECK(grad_check([&](Tape& t, const ParamTree& q) { return align::mcos_loss(t.param(q, "z"), f, 0.5); }, p,
                     1e-5) <= 1e-4);
    CHECK(grad_check([&](Tape& t, const ParamTree& q) { return align::mdms_loss(t.param(q, "z"), f, 0.25); }, p,
                     1e-5) <= 1e-4);
  }
  CHECK(checked == 20);
}

TEST_CASE("adaptive_lambda") {
  align::AlignConfig cfg;
  cfg.eps = 0;
  CHECK(align::adaptive_lambda(2.0, 2.0, cfg) == doctest::Approx(1.0));
  cfg.eps = 1e-8;
  CHECK(align::adaptive_lambda(3.0, 0.0, cfg) == cfg.lambda_max);
  CHECK(align::adaptive_lambda(0.0, 3.0, cfg) == 0.0);
  cfg.eps = 0;
  for (double c : {0.01, 3.0, 1e4}) {
    CHECK(align::adaptive_lambda(0.3 * c, 0.7 * c, cfg) == doctest::Approx(align::adaptive_lambda(0.3, 0.7, cfg)));
  }
}

TEST_CASE("semantic_oracle: deterministic, windowed, caption-dependent") {
  const auto x = random_motion(30, 18);
  const TextCondition a{{0, 4}, false}, b{{2, 5}, false};
  const Mat fa = align::semantic_oracle(x, a, 11, 32);
  CHECK(fa == align::semantic_oracle(x, a, 11, 32));
  CHECK(fa.rows() == 5);
  CHECK(fa.cols() == 32);
  CHECK(fa != align::semantic_oracle(x, b, 11, 32));
}
