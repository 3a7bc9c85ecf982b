#include "doctest.h"

#include "cmdm/errors.hpp"
#include "cmdm/nn/grad_check.hpp"
#include "cmdm/nn/kernels.hpp"
#include "cmdm/nn/optim.hpp"
#include "cmdm/nn/tape.hpp"
#include "test_util.hpp"

#include <cmath>
#include <numeric>
#include <vector>

using namespace cmdm;
using namespace cmdm::nn;
using cmdm::test::random_mat;

namespace {

std::vector<int> iota_positions(int n, int start = 0) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), start);
  return p;
}

}  // namespace

TEST_CASE("causal_attention: single key returns its value") {
  Mat q = random_mat(1, 1, 8), k = random_mat(2, 1, 8), v = random_mat(3, 1, 8);
  Mat out = causal_attention(q, k, v, 2);
  CHECK(test::max_abs_diff(out, v) < 1e-15);
}

TEST_CASE("causal_attention: identical keys average the visible prefix") {
  const int len = 7;
  Mat q = random_mat(4, len, 8);
  Mat k = random_mat(5, 1, 8).replicate(len, 1);
  Mat v = random_mat(6, len, 8);
  Mat out = causal_attention(q, k, v, 4);
  for (int t = 0; t < len; ++t) {
    RowVec expect = v.topRows(t + 1).colwise().mean();
    CHECK((out.row(t) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("causal_attention: prefix invariance is exact") {
  const int len = 9;
  Mat q = random_mat(7, len, 12), k = random_mat(8, len, 12), v = random_mat(9, len, 12);
  Mat base = causal_attention(q, k, v, 3);
  Mat v2 = v;
  v2.row(5) += random_mat(10, 1, 12).row(0);
  Mat pert = causal_attention(q, k, v2, 3);
  CHECK(base.topRows(5) == pert.topRows(5));
  CHECK(base.row(5) != pert.row(5));
  // Truncated-prefix recomputation gives the same rows.
  Mat trunc = causal_attention(q.topRows(5), k.topRows(5), v.topRows(5), 3);
  CHECK(test::max_abs_diff(trunc, base.topRows(5)) <= 1e-15);
}

TEST_CASE("causal_attention: heads must divide the dimension") {
  Mat x = random_mat(11, 3, 10);
  CHECK_THROWS_AS(causal_attention(x, x, x, 3), ConfigError);
}

TEST_CASE("attention: horizon limits visible keys") {
  const int len = 6;
  Mat q = random_mat(12, len, 4), k = random_mat(13, len, 4), v = random_mat(14, len, 4);
  AttentionMask band{true, 0, 2};
  Mat out = attention(q, k, v, 1, band);
  Mat ref = attention(q.row(4), k.middleRows(3, 2), v.middleRows(3, 2), 1, AttentionMask{false, 0, 0});
  CHECK(test::max_abs_diff(out.row(4), ref) < 1e-14);
}

TEST_CASE("apply_rope: position zero is identity") {
  Mat x = random_mat(20, 1, 8);
  std::vector<int> pos{0};
  CHECK(apply_rope(x, pos) == x);
}

TEST_CASE("apply_rope: rows keep their norm") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int dim = 2 * static_cast<int>(1 + seed % 6);
    Mat x = random_mat(100 + seed, 5, dim);
    std::vector<int> pos{3, 17, 250, 4096, static_cast<int>(seed * 31)};
    Mat y = apply_rope(x, pos);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      CHECK(std::abs(y.row(r).norm() - x.row(r).norm()) <= 1e-6 * x.row(r).norm());
    }
  }
}

TEST_CASE("apply_rope: dot products depend only on relative position") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int dim = 16;
    Mat q = random_mat(200 + seed, 1, dim), k = random_mat(300 + seed, 1, dim);
    const int i = static_cast<int>(seed * 3 % 40), j = static_cast<int>(seed * 7 % 40), s = static_cast<int>(seed * 11 + 5);
    std::vector<int> pi{i}, pj{j}, pis{i + s}, pjs{j + s};
    const double a = apply_rope(q, pi).row(0).dot(apply_rope(k, pj).row(0));
    const double b = apply_rope(q, pis).row(0).dot(apply_rope(k, pjs).row(0));
    CHECK(std::abs(a - b) <= 1e-5 * std::max(1.0, std::abs(a)));
  }
}

TEST_CASE("apply_rope: odd dimension is a configuration error") {
  Mat x = random_mat(21, 2, 5);
  std::vector<int> pos{0, 1};
  CHECK_THROWS_AS(apply_rope(x, pos), ConfigError);
}

TEST_CASE("grad_check: quadratic loss is exact") {
  ParamTree p;
  p.add("p", random_mat(30, 1, 5));
  LossFn loss = [](Tape& t, const ParamTree& tree) { return scale(sum(square(t.param(tree, "p"))), 0.5); };
  CHECK(grad_check(loss, p, 1e-3) <= 1e-10);
}

TEST_CASE("grad_check: rejects bad eps and non-finite losses") {
  ParamTree p;
  p.add("w", Mat::Constant(1, 1, -1.0));
  LossFn good = [](Tape& t, const ParamTree& tree) { return sum(t.param(tree, "w")); };
  CHECK_THROWS_AS(grad_check(good, p, 0.0), ConfigError);
  CHECK_THROWS_AS(grad_check(good, p, 0.1), ConfigError);
  LossFn bad = [](Tape& t, const ParamTree& tree) {
    Var w = t.param(tree, "w");
    return sum(scale(exp(scale(w, -1000.0)), 1e300));
  };
  try {
    grad_check(bad, p, 1e-5);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
}

TEST_CASE("grad_check: every op's analytic gradient matches finite differences") {
  ParamTree p;
  p.add("a", random_mat(40, 6, 8));
  p.add("b", random_mat(41, 8, 8));
  p.add("row", random_mat(42, 1, 8));
  p.add("k", random_mat(43, 6, 8));
  p.add("v", random_mat(44, 6, 8));
  p.add("table", random_mat(45, 5, 8));
  LossFn loss = [](Tape& t, const ParamTree& tree) {
    Var a = t.param(tree, "a");
    Var h = linear(a, t.param(tree, "b"), t.param(tree, "row"));
    h = add(gelu(h), silu(layer_norm(h)));
    std::vector<int> pos{0, 1, 2, 5, 9, 11};
    Var q = apply_rope(h, pos, 4);
    Var k = apply_rope(t.param(tree, "k"), pos, 4);
    Var att = attention(q, k, t.param(tree, "v"), 2, AttentionMask{true, 0, 4});
    std::vector<int> ids{0, 3, 3, 1, 4, 2};
    Var mixed = mul(att, gather_rows(t.param(tree, "table"), ids));
    Var cols = causal_im2col(mixed, 3, 2);
    Var up = upsample_rows(slice_cols(cols, 2, 8), 2);
    Var normed = row_normalize(add_scalar(up, 0.5));
    Var tr = matmul(normed, transpose(slice_rows(a, 0, 6)));
    Var tail = clamp(concat_rows(tr, exp(scale(tr, 0.3))), -5.0, 5.0);
    return add(mean(square(tail)), mean(abs(add_scalar(row_sum(tail), 0.1))));
  };
  GradCheckReport r = grad_check_report(loss, p, 1e-5);
  INFO(r.worst_path << "[" << r.worst_index << "] analytic=" << r.analytic << " numeric=" << r.numeric);
  CHECK(r.max_rel_err <= 1e-5);
}

TEST_CASE("kernels are deterministic") {
  Mat q = random_mat(50, 8, 16), k = random_mat(51, 8, 16), v = random_mat(52, 8, 16);
  CHECK(causal_attention(q, k, v, 4) == causal_attention(q, k, v, 4));
  std::vector<int> pos = iota_positions(8, 3);
  CHECK(apply_rope(q, pos, 4) == apply_rope(q, pos, 4));
}

TEST_CASE("AdamW with clipping and cosine decay minimises a quadratic") {
  ParamTree p;
  p.add("w", Mat::Constant(1, 3, 5.0));
  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  const long steps = 500;
  for (long s = 0; s < steps; ++s) {
    ParamTree g;
    g.set("w", p.at("w"));
    clip_grad_norm(g, 1.0);
    opt.step(p, g, cosine_lr(s, steps, 0.1, 10));
  }
  CHECK(p.at("w").cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("clip_grad_norm and cosine_lr boundaries") {
  ParamTree g;
  g.set("a", Mat::Constant(1, 4, 2.0));
  const double before = clip_grad_norm(g, 1.0);
  CHECK(before == doctest::Approx(4.0));
  CHECK(std::sqrt(g.squared_norm()) == doctest::Approx(1.0));
  CHECK(cosine_lr(0, 100, 1e-3, 0) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 1e-3, 0) == doctest::Approx(0.0));
  CHECK(cosine_lr(4, 100, 1e-3, 10) == doctest::Approx(5e-4));
}

TEST_CASE("keyed rng: same key same draw, distinct keys independent") {
  RngKey key{42};
  CHECK(key.normal(DrawKind::init, 3, 0, 2, 5) == key.normal(DrawKind::init, 3, 0, 2, 5));
  CHECK(key.normal(DrawKind::init, 3, 0, 2, 5) != key.normal(DrawKind::init, 4, 0, 2, 5));
  CHECK(key.normal(DrawKind::init, 3, 0, 2, 5) != key.normal(DrawKind::ancestral, 3, 0, 2, 5));
  Mat big = key.normal(DrawKind::probe, 0, 0, 1, 200000);
  const double mu = big.mean();
  const double var = (big.array() - mu).square().mean();
  CHECK(std::abs(mu) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
  for (int i = 0; i < 1000; ++i) {
    const auto v = key.uniform_int(DrawKind::level, i, 0, 0, 10);
    CHECK(v >= 0);
    CHECK(v <= 10);
  }
}

TEST_CASE("ParamTree bookkeeping") {
  ParamTree t;
  t.add("x.a", Mat::Ones(2, 2));
  t.add("x.b", Mat::Ones(1, 3));
  t.add("y.c", Mat::Ones(1, 1));
  CHECK_THROWS_AS(t.add("x.a", Mat::Ones(1, 1)), ConfigError);
  CHECK(t.num_scalars() == 8);
  CHECK(t.subtree("x.").size() == 2);
  t.at("y.c")(0, 0) = std::nan("");
  CHECK_THROWS_AS(t.check_finite("test"), NumericalError);
}
