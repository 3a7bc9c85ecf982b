#include "doctest.h"

#include "cmdm/data/toy_motion.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/errors.hpp"
#include "cmdm/metrics/metrics.hpp"
#include "cmdm/nn/kernels.hpp"
#include "cmdm/vae/mac_vae.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace cmdm;
using cmdm::nn::Mat;
using cmdm::test::random_mat;

namespace {

MotionSequence cubic(int T) {
  MotionSequence m{Mat::Zero(T, 4), 1.0};
  for (int t = 0; t < T; ++t) m.frames(t, 0) = std::pow(t, 3);
  return m;
}

MotionSequence rigid(const MotionSequence& x, double angle, double dx, double dy) {
  MotionSequence y = x;
  const double c = std::cos(angle), s = std::sin(angle);
  for (int t = 0; t < x.length(); ++t) {
    y.frames(t, 0) = c * x.frames(t, 0) - s * x.frames(t, 1) + dx;
    y.frames(t, 1) = s * x.frames(t, 0) + c * x.frames(t, 1) + dy;
  }
  return y;
}

}  // namespace

TEST_CASE("mpjpe: zero, constant offset, straight-line oracle") {
  const MotionSequence x{random_mat(1, 10, 4), 20};
  CHECK(metrics::mpjpe(x, x) == 0.0);
  MotionSequence y = x;
  y.frames.col(0).array() += 0.3;
  y.frames.col(1).array() -= 0.4;
  y.frames.col(3).array() += 9.0;  // velocity channels are ignored
  CHECK(metrics::mpjpe(x, y) == doctest::Approx(0.5).epsilon(1e-12));

  const MotionSequence z{random_mat(2, 10, 4), 20};
  double oracle = 0;
  for (int t = 0; t < 10; ++t) oracle += std::hypot(x.frames(t, 0) - z.frames(t, 0), x.frames(t, 1) - z.frames(t, 1));
  CHECK(std::abs(metrics::mpjpe(x, z) - oracle / 10) <= 1e-10);
  CHECK_THROWS_AS(metrics::mpjpe(x, MotionSequence{Mat::Zero(9, 4), 20}), ShapeError);
}

TEST_CASE("jerk: cubic at fps 1 is 6, lines are 0") {
  const auto j = metrics::jerk_magnitude(cubic(12));
  for (int t = 2; t < 10; ++t) CHECK(j[static_cast<std::size_t>(t)] == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(std::isnan(j[0]));
  CHECK(std::isnan(j[11]));
  const auto e = metrics::jerk_metrics(cubic(20), 10, 6);
  CHECK(e.pj == doctest::Approx(6.0));
  CHECK(e.auj == doctest::Approx(0.0));

  MotionSequence line{Mat::Zero(20, 4), 20};
  for (int t = 0; t < 20; ++t) line.frames.row(t).head<2>() << 0.1 * t, -0.05 * t;
  const auto l = metrics::jerk_metrics(line, 10, 8);
  CHECK(l.pj <= 1e-9);
  CHECK(l.auj <= 1e-9);
  CHECK_THROWS_AS(metrics::jerk_metrics(line, 3, 8), InputError);
  CHECK_THROWS_AS(metrics::jerk_metrics(line, 10, 2), InputError);
}

TEST_CASE("jerk metrics are invariant to rigid motions") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const MotionSequence x{random_mat(10 + s, 40, 4), 20};
    const auto a = metrics::jerk_metrics(x, 20, 10);
    const auto r = RngKey{s}.normal(DrawKind::probe, 0, 0, 1, 3);
    const auto b = metrics::jerk_metrics(rigid(x, r(0, 0) * 3, r(0, 1) * 10, r(0, 2) * 10), 20, 10);
    CHECK(b.pj == doctest::Approx(a.pj).epsilon(1e-9));
    CHECK(b.auj == doctest::Approx(a.auj).epsilon(1e-9));
  }
}

TEST_CASE("hard concatenation has more transition jerk than a continuous template") {
  const auto a = data::ToyCaption::from_index(0);
  const auto b = data::ToyCaption::from_index(5);
  const auto concat = metrics::hard_concatenation(a, b, 32, 20.0, 0.0, 1);
  const auto smooth = data::generate_trajectory(a, 64, 20.0, 0.0, 1);
  CHECK(concat.length() == 64);
  CHECK(metrics::jerk_metrics(concat, 32, 16).auj > metrics::jerk_metrics(smooth, 32, 16).auj);
  CHECK(concat.frames.row(32).head<2>() == concat.frames.row(31).head<2>());
}

TEST_CASE("causality_probe: causal kernels read 0, unmasked attention leaks") {
  const Mat x = random_mat(3, 12, 8);
  const RngKey key{4};
  const auto causal = [](const Mat& v) { return nn::causal_attention(v, v, v, 2); };
  CHECK(metrics::causality_probe(causal, x, 5, 6, 5, key) == 0.0);
  const auto unmasked = [](const Mat& v) {
    nn::AttentionMask open;
    open.causal = false;
    return nn::attention(v, v, v, 2, open);
  };
  CHECK(metrics::causality_probe(unmasked, x, 5, 6, 5, key) > 0.0);
  CHECK_THROWS_AS(metrics::causality_probe(causal, x, 12, 1, 1, key), InputError);
}

TEST_CASE("causality_probe: encoder at 4-frame granularity") {
  vae::VaeConfig cfg;
  cfg.channels = 8;
  cfg.latent_dim = 3;
  const vae::VaeModel m{cfg, vae::init_vae(cfg, RngKey{5})};
  const auto enc = [&](const Mat& v) { return vae::encode({v, 20}, m).mu; };
  const Mat x = random_mat(6, 24, 4);
  for (int probe = 3; probe < 23; probe += 4) {
    CHECK(metrics::causality_probe(enc, x, probe, (probe + 1) / 4, 3, RngKey{7}) == 0.0);
  }
}

TEST_CASE("parallel_for visits every index and propagates errors") {
  std::vector<int> hits(50, 0);
  metrics::parallel_for(50, 4, [&](int i) { hits[static_cast<std::size_t>(i)] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(metrics::parallel_for(10, 3, [](int i) { if (i == 7) throw InputError("boom"); }), InputError);
}

TEST_CASE("consistency_eval: untrained model is near chance") {
  vae::VaeConfig vcfg;
  vcfg.channels = 16;
  vcfg.latent_dim = 4;
  const vae::VaeModel vae{vcfg, vae::init_vae(vcfg, RngKey{8})};
  dit::DitConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.latent_dim = 4;
  cfg.max_level = 10;
  const auto params = dit::init_dit(cfg, RngKey{9}, dit::DitInit::random);
  sampler::Generator gen;
  gen.dit_params = &params;
  gen.dit_config = cfg;
  gen.schedule = diffusion::build_schedule(10, diffusion::ScheduleKind::linear);
  gen.vae = &vae;
  metrics::ConsistencyOptions opt;
  opt.n_per_caption = 6;
  opt.latent_frames = 16;
  const auto caps = data::all_captions();
  const auto r = metrics::consistency_eval(gen, caps, opt);
  CHECK(r.target.size() == 48);
  // Chance is 1/8; 48 samples give a binomial sd of about 0.048.
  CHECK(r.accuracy <= 0.125 + 3 * 0.048);
}
