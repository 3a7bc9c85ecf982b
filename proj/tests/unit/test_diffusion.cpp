#include "doctest.h"

#include "cmdm/diffusion/schedule.hpp"
#include "cmdm/diffusion/training.hpp"
#include "cmdm/dit/causal_dit.hpp"
#include "cmdm/errors.hpp"
#include "cmdm/nn/grad_check.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace cmdm;
using namespace cmdm::diffusion;
using cmdm::nn::Mat;
using cmdm::test::random_mat;

TEST_CASE("build_schedule: boundary values and monotonicity") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int K : {1, 2, 10, 1000}) {
      const auto s = build_schedule(K, kind);
      CHECK(s.alpha_bar[0] == 1.0);
      CHECK(s.sigma[1] == 0.0);
      for (int k = 1; k <= K; ++k) {
        CHECK(s.alpha_bar[static_cast<std::size_t>(k)] < s.alpha_bar[static_cast<std::size_t>(k - 1)]);
        CHECK(s.alpha[static_cast<std::size_t>(k)] > 0);
        CHECK(s.alpha[static_cast<std::size_t>(k)] < 1);
      }
      CHECK_NOTHROW(s.validate());
    }
  }
  CHECK(build_schedule(1000, ScheduleKind::linear).alpha_bar[1000] < 1e-4);
  CHECK_THROWS_AS(build_schedule(0, ScheduleKind::linear), ConfigError);
  CHECK(parse_schedule_kind("cosine") == ScheduleKind::cosine);
  CHECK_THROWS_AS(parse_schedule_kind("sigmoid"), ConfigError);
}

TEST_CASE("subsample_schedule: stride 20 at K=1000 -> 50") {
  const auto full = build_schedule(1000, ScheduleKind::linear);
  const auto s = subsample_schedule(full, 50);
  CHECK(s.K == 50);
  for (int j = 1; j <= 50; ++j) {
    CHECK(s.train_index[static_cast<std::size_t>(j)] == 20 * j);
    CHECK(s.alpha_bar[static_cast<std::size_t>(j)] == full.alpha_bar[static_cast<std::size_t>(20 * j)]);
  }
  CHECK_NOTHROW(s.validate());

  const auto same = subsample_schedule(full, 1000);
  CHECK(same.alpha_bar == full.alpha_bar);
  for (int k = 0; k <= 1000; ++k) CHECK(same.train_index[static_cast<std::size_t>(k)] == k);
  CHECK_THROWS_AS(subsample_schedule(full, 1001), ConfigError);
}

TEST_CASE("forward_diffuse: level 0 is identity and inversion recovers z") {
  const auto s = build_schedule(100, ScheduleKind::linear);
  const Mat z = random_mat(1, 5, 3);
  const std::vector<int> zeros(5, 0);
  CHECK(forward_diffuse(z, zeros, s, RngKey{2}).z_tilde == z);

  const std::vector<int> levels{0, 7, 50, 99, 100};
  const auto d = forward_diffuse(z, levels, s, RngKey{2});
  for (int t = 0; t < 5; ++t) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(levels[static_cast<std::size_t>(t)])];
    const Mat back = (d.z_tilde.row(t) - std::sqrt(1 - ab) * d.eps.row(t)) / std::sqrt(ab);
    CHECK(test::max_abs_diff(back, z.row(t)) <= 1e-6);
  }
}

TEST_CASE("forward_diffuse: a frame's draw ignores other frames' levels") {
  const auto s = build_schedule(100, ScheduleKind::linear);
  const Mat z = random_mat(3, 4, 2);
  const std::vector<int> a{10, 20, 30, 40}, b{10, 90, 30, 5};
  const auto da = forward_diffuse(z, a, s, RngKey{4});
  const auto db = forward_diffuse(z, b, s, RngKey{4});
  CHECK(da.eps.row(0) == db.eps.row(0));
  CHECK(da.eps.row(2) == db.eps.row(2));
}

TEST_CASE("reverse_step: formula oracle, single-step inversion, determinism") {
  const auto s = build_schedule(20, ScheduleKind::linear);
  const Mat zk = random_mat(5, 1, 4), eps = random_mat(6, 1, 4), w = random_mat(7, 1, 4);
  const int k = 9;
  const double a = s.alpha[k], ab = s.alpha_bar[k];
  const Mat oracle = (zk - (1 - a) / std::sqrt(1 - ab) * eps) / std::sqrt(a) + s.sigma[k] * w;
  CHECK(test::max_abs_diff(reverse_step_with(zk, eps, k, s, w), oracle) <= 1e-12);
  CHECK(reverse_step(zk, eps, k, s, RngKey{8}, 3) == reverse_step(zk, eps, k, s, RngKey{8}, 3));
  CHECK_THROWS_AS(reverse_step(zk, eps, 0, s, RngKey{8}, 3), InputError);

  const auto one = build_schedule(1, ScheduleKind::linear);
  const Mat z = random_mat(9, 3, 4);
  const std::vector<int> levels(3, 1);
  const auto d = forward_diffuse(z, levels, one, RngKey{10});
  CHECK(test::max_abs_diff(reverse_step(d.z_tilde, d.eps, 1, one, RngKey{11}, 0), z) <= 1e-6);
}

TEST_CASE("cfg_combine") {
  const Mat c = random_mat(1, 2, 3), u = random_mat(2, 2, 3);
  CHECK(test::max_abs_diff(cfg_combine(c, u, 1.0), c) <= 1e-14);
  CHECK(cfg_combine(c, u, 0.0) == u);
  CHECK(test::max_abs_diff(cfg_combine(c, Mat::Zero(2, 3), 3.0), 3.0 * c) == 0.0);
}

TEST_CASE("drop_condition: rate 0.1 over 1e5 draws") {
  const RngKey key{12};
  int dropped = 0;
  for (int i = 0; i < 100000; ++i) dropped += dit::drop_condition(key.derive(static_cast<std::uint64_t>(i)), 0, 0, 0.1);
  CHECK(std::abs(dropped / 1e5 - 0.1) <= 0.01);
  CHECK(dit::make_null_condition(dit::DitConfig{}) == dit::make_null_condition(dit::DitConfig{}));
  CHECK(dit::make_null_condition(dit::DitConfig{}).null_flag);
}

namespace {

dit::DitConfig tiny_dit() {
  dit::DitConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.mlp_ratio = 2;
  c.latent_dim = 3;
  c.max_level = 10;
  return c;
}

}  // namespace

TEST_CASE("df_training_loss: exact oracle gives 0, equal levels give the full-sequence loss") {
  const auto s = build_schedule(10, ScheduleKind::linear);
  const Mat z = random_mat(13, 2 * 4, 3);
  const std::vector<TextCondition> conds{{{0, 4}, false}, {{1, 5}, false}};
  const TextCondition null_cond = dit::make_null_condition(tiny_dit());
  const auto batch = df_prepare(z, conds, 4, s, RngKey{14}, null_cond);
  for (int k : batch.levels) {
    CHECK(k >= 0);
    CHECK(k <= 10);
  }
  nn::Tape tape;
  const Predictor oracle = [](nn::Tape& t, const DfBatch& b) { return t.constant(b.eps); };
  CHECK(df_training_loss(tape, oracle, batch).scalar() == 0.0);

  DfOptions fixed;
  fixed.fixed_level = 6;
  const auto eq = df_prepare(z, conds, 4, s, RngKey{14}, null_cond, fixed);
  for (int k : eq.levels) CHECK(k == 6);
  // Full-sequence objective evaluated directly.
  const auto params = dit::init_dit(tiny_dit(), RngKey{15}, dit::DitInit::random);
  Mat pred(8, 3);
  for (int i = 0; i < 2; ++i) {
    const std::vector<int> lv(4, s.train_index[6]);
    pred.middleRows(i * 4, 4) = dit::dit_forward(params, tiny_dit(), eq.z_tilde.middleRows(i * 4, 4), lv, eq.conds[static_cast<std::size_t>(i)]);
  }
  const double direct = (pred - eq.eps).squaredNorm() / static_cast<double>(pred.size());
  nn::Tape t2;
  CHECK(df_training_loss(t2, dit_predictor(params, tiny_dit()), eq).scalar() == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("df_training_loss: gradient check on 2-frame toys") {
  const auto s = build_schedule(10, ScheduleKind::linear);
  const dit::DitConfig cfg = tiny_dit();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto params = dit::init_dit(cfg, RngKey{20 + seed}, dit::DitInit::random);
    const Mat z = random_mat(30 + seed, 2, 3);
    const std::vector<TextCondition> conds{{{2, 4}, false}};
    const auto batch = df_prepare(z, conds, 2, s, RngKey{40 + seed}, dit::make_null_condition(cfg));
    const nn::LossFn fn = [&](nn::Tape& t, const nn::ParamTree& p) {
      return df_training_loss(t, dit_predictor(p, cfg), batch);
    };
    const auto rep = nn::grad_check_report(fn, params, 1e-5, 4);
    INFO(rep.worst_path, " ", rep.worst_index, " a=", rep.analytic, " n=", rep.numeric);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}
