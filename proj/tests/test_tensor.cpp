#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "loma/tensor.hpp"
#include "testutil.hpp"

using namespace loma;

namespace {

Mat<double> from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Mat<double> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& row : rows) {
    Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

MaskMat mask_from_rows(std::initializer_list<std::initializer_list<int>> rows) {
  MaskMat m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& row : rows) {
    Index j = 0;
    for (int v : row) m(i, j++) = static_cast<std::uint8_t>(v);
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("matmul identity and dot product") {
  Graph<double> g;
  auto eye = make_const(from_rows({{1, 0}, {0, 1}}));
  auto b = make_const(from_rows({{5, 6}, {7, 8}}));
  auto out = matmul(g, eye, b);
  CHECK(out->value == b->value);

  auto r = make_const(from_rows({{1, 2}}));
  auto c = make_const(from_rows({{3}, {4}}));
  auto dot = matmul(g, r, c);
  CHECK(dot->value(0, 0) == 11.0);

  auto bad = make_const(from_rows({{1, 2, 3}}));
  CHECK_THROWS_AS((void)matmul(g, bad, c), ShapeError);
}

TEST_CASE("matmul gradient matches central differences") {
  NormalRng rng(11);
  auto a = make_param(testutil::random_mat(3, 4, rng));
  auto b = make_param(testutil::random_mat(4, 2, rng));

  testutil::GradCheck check;
  check.rtol = 1e-6;
  check.h = 1e-5;
  check.run(
      {a},
      [&] {
        Graph<double> g;
        return sum(g, matmul(g, a, b))->value(0, 0);
      },
      [&] {
        Graph<double> g;
        g.backward(sum(g, matmul(g, a, b)));
      });
  CHECK(check.ok);
  CHECK(check.max_rel_err < 1e-6);
}

TEST_CASE("masked_softmax examples") {
  Graph<double> g;

  auto uniform = masked_softmax(g, make_const(from_rows({{0, 0, 0}})), mask_from_rows({{1, 1, 1}}));
  for (int j = 0; j < 3; ++j) CHECK(uniform->value(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto single = masked_softmax(g, make_const(from_rows({{5, 100}})), mask_from_rows({{1, 0}}));
  CHECK(single->value(0, 0) == 1.0);
  CHECK(single->value(0, 1) == 0.0);

  // two-way softmax evaluated directly
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  auto partial = masked_softmax(g, make_const(from_rows({{1, 2, 3}})), mask_from_rows({{1, 1, 0}}));
  CHECK(partial->value(0, 0) == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-12));
  CHECK(partial->value(0, 1) == doctest::Approx(e2 / (e1 + e2)).epsilon(1e-12));
  CHECK(partial->value(0, 2) == 0.0);

  CHECK_THROWS_AS((void)masked_softmax(g, make_const(from_rows({{1, 2}})), mask_from_rows({{0, 0}})),
                  NumericError);
}

TEST_CASE("masked_softmax rows normalize and ignore blocked scores") {
  NormalRng rng(5);
  Mat<double> scores = testutil::random_mat(6, 9, rng, 3.0);
  MaskMat mask(6, 9);
  for (Index i = 0; i < 6; ++i) {
    bool any = false;
    for (Index j = 0; j < 9; ++j) {
      mask(i, j) = static_cast<std::uint8_t>(rng.uniform01() < 0.5);
      any |= mask(i, j) != 0;
    }
    if (!any) mask(i, static_cast<Index>(rng.below(9))) = 1;
  }
  const Mat<double> p = masked_softmax_rows(scores, mask);
  for (Index i = 0; i < 6; ++i) {
    CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
    for (Index j = 0; j < 9; ++j) {
      if (!mask(i, j)) CHECK(p(i, j) == 0.0);
    }
  }

  // Entries under the mask cannot influence the output, bit for bit.
  Mat<double> scrambled = scores;
  for (Index i = 0; i < 6; ++i) {
    for (Index j = 0; j < 9; ++j) {
      if (!mask(i, j)) scrambled(i, j) = 1e6 * rng.standard_normal();
    }
  }
  const Mat<double> p2 = masked_softmax_rows(scrambled, mask);
  CHECK((p - p2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cross entropy examples") {
  Graph<double> g;

  Mat<double> flat = Mat<double>::Zero(1, 4);
  auto uniform = cross_entropy(g, make_const(std::move(flat)), 2);
  CHECK(uniform->value(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Mat<double> peaked = Mat<double>::Zero(1, 8);
  peaked(0, 3) = 30.0;
  auto saturated = cross_entropy(g, make_const(std::move(peaked)), 3);
  CHECK(saturated->value(0, 0) < 1e-9);

  // direct evaluation: ln(e^1+e^2+e^3) - 1
  auto direct = cross_entropy(g, make_const(from_rows({{1, 2, 3}})), 0);
  const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 1.0;
  CHECK(direct->value(0, 0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(direct->value(0, 0) == doctest::Approx(2.4076).epsilon(1e-4));

  CHECK_THROWS_AS((void)cross_entropy(g, make_const(from_rows({{1, 2, 3}})), 3), ShapeError);
  CHECK_THROWS_AS((void)cross_entropy(g, make_const(from_rows({{1, 2, 3}})), -1), ShapeError);
}

TEST_CASE("backward fills gradients exactly once") {
  NormalRng rng(3);
  auto x = make_param(testutil::random_mat(3, 5, rng));

  Graph<double> g;
  auto loss = sum(g, x);
  g.backward(loss);
  CHECK(x->grad.isOnes());

  CHECK_THROWS_AS(g.backward(loss), StateError);
}

TEST_CASE("backward through cross entropy of a projection") {
  NormalRng rng(17);
  auto w = make_param(testutil::random_mat(4, 6, rng));
  auto x = make_const(testutil::random_mat(1, 4, rng));
  const int target = 2;

  testutil::GradCheck check;
  check.run(
      {w},
      [&] {
        Graph<double> g;
        return cross_entropy(g, matmul(g, x, w), target)->value(0, 0);
      },
      [&] {
        Graph<double> g;
        g.backward(cross_entropy(g, matmul(g, x, w), target));
      });
  CHECK(check.ok);
  CHECK(check.max_rel_err < 1e-4);
}

TEST_CASE("parameters off the loss path keep zero gradient") {
  NormalRng rng(23);
  auto used = make_param(testutil::random_mat(2, 2, rng));
  auto unused = make_param(testutil::random_mat(2, 2, rng));

  Graph<double> g;
  g.backward(sum(g, mul(g, used, used)));
  CHECK(used->grad.cwiseAbs().maxCoeff() > 0.0);
  CHECK(unused->grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects losses from another graph") {
  auto x = make_param(from_rows({{1.0}}));
  Graph<double> g1;
  auto loss = sum(g1, x);
  Graph<double> g2;
  CHECK_THROWS_AS(g2.backward(loss), StateError);
}

// Every registered op against the central-difference oracle on random small
// shapes (each extent <= 8).
TEST_CASE("op gradients match finite differences") {
  NormalRng rng(101);
  auto weight = [&](Index r, Index c) { return make_const(testutil::random_mat(r, c, rng)); };

  auto run = [&](const std::vector<TensorPtr<double>>& params, auto build, double rtol = 1e-4) {
    testutil::GradCheck check;
    check.rtol = rtol;
    check.run(
        params, [&] { Graph<double> g; return build(g)->value(0, 0); },
        [&] {
          Graph<double> g;
          g.backward(build(g));
        });
    CAPTURE(check.max_rel_err);
    CHECK(check.ok);
  };

  SUBCASE("add and mul and scale") {
    auto a = make_param(testutil::random_mat(4, 7, rng));
    auto b = make_param(testutil::random_mat(4, 7, rng));
    auto w = weight(4, 7);
    run({a, b}, [&](Graph<double>& g) {
      return sum(g, mul(g, scale(g, add(g, a, mul(g, a, b)), 0.7), w));
    });
  }
  SUBCASE("silu") {
    auto a = make_param(testutil::random_mat(3, 8, rng));
    auto w = weight(3, 8);
    run({a}, [&](Graph<double>& g) { return sum(g, mul(g, silu(g, a), w)); });
  }
  SUBCASE("matmul_nt") {
    auto a = make_param(testutil::random_mat(5, 3, rng));
    auto b = make_param(testutil::random_mat(6, 3, rng));
    auto w = weight(5, 6);
    run({a, b}, [&](Graph<double>& g) { return sum(g, mul(g, matmul_nt(g, a, b), w)); });
  }
  SUBCASE("slice_rows") {
    auto a = make_param(testutil::random_mat(8, 4, rng));
    auto w = weight(3, 4);
    run({a}, [&](Graph<double>& g) { return sum(g, mul(g, slice_rows(g, a, 2, 3), w)); });
  }
  SUBCASE("embedding_rows") {
    auto table = make_param(testutil::random_mat(8, 5, rng));
    std::vector<int> ids{3, 1, 3, 7};  // repeated id exercises accumulation
    auto w = weight(4, 5);
    run({table}, [&](Graph<double>& g) { return sum(g, mul(g, embedding_rows(g, table, ids), w)); });
  }
  SUBCASE("rope") {
    auto x = make_param(testutil::random_mat(5, 6, rng));
    std::vector<int> pos{0, 3, 3, 9, 1};
    auto w = weight(5, 6);
    run({x}, [&](Graph<double>& g) { return sum(g, mul(g, rope(g, x, pos, 10000.0), w)); });
  }
  SUBCASE("rms_norm") {
    auto x = make_param(testutil::random_mat(4, 6, rng));
    auto gain = make_param(testutil::random_mat(1, 6, rng));
    auto w = weight(4, 6);
    run({x, gain}, [&](Graph<double>& g) { return sum(g, mul(g, rms_norm(g, x, gain), w)); });
  }
  SUBCASE("masked_softmax") {
    auto scores = make_param(testutil::random_mat(4, 6, rng));
    MaskMat mask(4, 6);
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 6; ++j) mask(i, j) = static_cast<std::uint8_t>(rng.uniform01() < 0.6);
      mask(i, static_cast<Index>(i)) = 1;
    }
    auto w = weight(4, 6);
    run({scores}, [&](Graph<double>& g) { return sum(g, mul(g, masked_softmax(g, scores, mask), w)); });
  }
  SUBCASE("cross_entropy_rows with gaps") {
    auto logits = make_param(testutil::random_mat(5, 7, rng));
    std::vector<int> labels{2, -1, 6, -1, 0};
    run({logits}, [&](Graph<double>& g) { return cross_entropy_rows(g, logits, labels); });
  }
}

TEST_CASE("same seed, same op sequence, identical bits") {
  auto build = [](std::uint64_t seed) {
    NormalRng rng(seed);
    auto a = make_param(testutil::random_mat(6, 6, rng));
    auto b = make_param(testutil::random_mat(6, 6, rng));
    Graph<double> g;
    auto out = silu(g, matmul(g, a, b));
    auto loss = sum(g, out);
    g.backward(loss);
    return std::make_pair(out->value, a->grad);
  };
  auto [v1, g1] = build(42);
  auto [v2, g2] = build(42);
  CHECK((v1 - v2).cwiseAbs().maxCoeff() == 0.0);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
  auto [v3, g3] = build(43);
  CHECK((v1 - v3).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("masked gradient stays exactly zero") {
  NormalRng rng(9);
  auto scores = make_param(testutil::random_mat(3, 5, rng));
  MaskMat mask = MaskMat::Ones(3, 5);
  mask(0, 4) = 0;
  mask(2, 0) = 0;
  mask(2, 1) = 0;

  Graph<double> g;
  auto w = make_const(testutil::random_mat(3, 5, rng));
  g.backward(sum(g, mul(g, masked_softmax(g, scores, mask), w)));
  CHECK(scores->grad(0, 4) == 0.0);
  CHECK(scores->grad(2, 0) == 0.0);
  CHECK(scores->grad(2, 1) == 0.0);
  CHECK(scores->grad(1, 1) != 0.0);
}
