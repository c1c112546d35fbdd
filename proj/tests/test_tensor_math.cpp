#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "csr/errors.hpp"
#include "csr/tensor_math.hpp"
#include "test_helpers.hpp"

namespace csr {
namespace {

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine(DenseVector{1, 0}, DenseVector{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine(DenseVector{1, 0}, DenseVector{0, 1}), 0.0);
  EXPECT_NEAR(cosine(DenseVector{1, 1}, DenseVector{1, 0}), 0.70710678, 1e-8);
}

TEST(Cosine, ZeroNormNamesArgument) {
  try {
    cosine(DenseVector{1, 0}, DenseVector{0, 0});
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos) << e.what();
  }
  try {
    cosine(DenseVector{0, 0}, DenseVector{1, 0});
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("first"), std::string::npos) << e.what();
  }
}

TEST(Cosine, DimensionMismatch) {
  EXPECT_THROW(cosine(DenseVector{1, 0}, DenseVector{1, 0, 0}), DimensionError);
}

TEST(Cosine, SelfSimilarityAndSymmetry) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const auto u = testing::random_vector(rng, 1 + t % 17, 1.0 + t);
    const auto v = testing::random_vector(rng, u.size());
    EXPECT_NEAR(cosine(u, u), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(cosine(u, v), cosine(v, u));
    EXPECT_LE(std::abs(cosine(u, v)), 1.0);
  }
}

TEST(SpatialSoftmax, Examples) {
  const auto uniform = spatial_softmax(Grid(2, 2, 0.0));
  for (double x : uniform.values) EXPECT_DOUBLE_EQ(x, 0.25);

  const auto analytic = spatial_softmax(Grid(1, 2, {0.0, std::log(3.0)}));
  EXPECT_NEAR(analytic.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(analytic.at(0, 1), 0.75, 1e-15);

  const auto saturated = spatial_softmax(Grid(2, 2, {100, 0, 0, 0}));
  // The exact value 1/(1+3e-100) exceeds 1 - 1e-40 but rounds to 1.0 in f64.
  EXPECT_EQ(saturated.at(0, 0), 1.0);
  EXPECT_LT(saturated.at(0, 1), 1e-40);
  EXPECT_LT(saturated.at(1, 0), 1e-40);
  EXPECT_LT(saturated.at(1, 1), 1e-40);
}

TEST(SpatialSoftmax, SumsToOneAndShiftInvariant) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    Grid g(1 + t % 5, 1 + t % 7);
    for (auto& x : g.values) x = rng.normal(0.0, 30.0);
    const auto s = spatial_softmax(g);
    double sum = 0.0;
    for (double x : s.values) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);

    Grid shifted = g;
    for (auto& x : shifted.values) x += 1234.5;
    const auto s2 = spatial_softmax(shifted);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s.values[i], s2.values[i], 1e-12);
  }
}

TEST(SpatialSoftmax, RejectsNonFinite) {
  EXPECT_THROW(spatial_softmax(Grid(1, 2, {0.0, std::nan("")})), DomainError);
}

TEST(ScaledSoftmax, Examples) {
  const auto equal = scaled_softmax(DenseVector{0.5, 0.5}, 10.0);
  EXPECT_DOUBLE_EQ(equal[0], 0.5);
  EXPECT_DOUBLE_EQ(equal[1], 0.5);

  for (double scale : {1e-3, 1.0, 1e3}) {
    const auto single = scaled_softmax(DenseVector{-7.0}, scale);
    ASSERT_EQ(single.size(), 1u);
    EXPECT_DOUBLE_EQ(single[0], 1.0);
  }

  const auto analytic = scaled_softmax(DenseVector{1.0, 0.0}, std::log(4.0));
  EXPECT_NEAR(analytic[0], 0.8, 1e-15);
  EXPECT_NEAR(analytic[1], 0.2, 1e-15);
}

TEST(ScaledSoftmax, NonPositiveScale) {
  EXPECT_THROW(scaled_softmax(DenseVector{1.0, 0.0}, 0.0), DomainError);
  EXPECT_THROW(scaled_softmax(DenseVector{1.0, 0.0}, -1.0), DomainError);
}

TEST(ScaledSoftmax, PreservesArgmaxAndSharpens) {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    auto v = testing::random_vector(rng, 2 + t % 9);
    if (t % 4 == 0) v[1] = v[argmax(v)];  // force a tie
    const double scale = rng.uniform(0.01, 50.0);
    const auto s = scaled_softmax(v, scale);
    double sum = 0.0;
    for (double x : s) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(argmax(s), argmax(v));

    const auto sharper = scaled_softmax(v, scale * 2.0);
    EXPECT_GE(sharper[argmax(v)], s[argmax(v)] - 1e-15);

    DenseVector shifted = v;
    for (auto& x : shifted) x -= 42.0;
    const auto s2 = scaled_softmax(shifted, scale);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], s2[i], 1e-12);
  }
}

TEST(ScaledSoftmax, LargeScaleDoesNotOverflow) {
  const auto s = scaled_softmax(DenseVector{1.0, 0.99}, 1e6);
  EXPECT_TRUE(all_finite(s));
  EXPECT_DOUBLE_EQ(s[0], 1.0);
}

TEST(L2Normalize, Examples) {
  const auto a = l2_normalize(DenseVector{3, 4});
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(a[1], 0.8, 1e-15);
  EXPECT_EQ(l2_normalize(DenseVector{1, 0, 0}), (DenseVector{1, 0, 0}));
  EXPECT_THROW(l2_normalize(DenseVector{0, 0}), DomainError);
  EXPECT_THROW(l2_normalize(DenseVector{1e-13, 0}), DomainError);
}

TEST(L2Normalize, UnitNormAndDirection) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto v = testing::random_vector(rng, 1 + t % 20, std::pow(10.0, t % 9 - 4));
    const auto u = l2_normalize(v);
    EXPECT_NEAR(norm(u), 1.0, 1e-12);
    EXPECT_NEAR(cosine(u, v), 1.0, 1e-12);
  }
}

TEST(ClipNonneg, Examples) {
  EXPECT_EQ(clip_nonneg(Grid(1, 2, {-0.5, 0.5})), Grid(1, 2, {0.0, 0.5}));
  const Grid pos(2, 2, {0.1, 2.0, 3.0, 0.0});
  EXPECT_EQ(clip_nonneg(pos), pos);
  EXPECT_EQ(clip_nonneg(Grid(2, 1, {-1.0, -2.0})), Grid(2, 1, 0.0));
}

TEST(ClipNonneg, Idempotent) {
  Rng rng(9);
  Grid g(4, 5);
  for (auto& x : g.values) x = rng.normal();
  const auto once = clip_nonneg(g);
  EXPECT_EQ(clip_nonneg(once), once);
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax(DenseVector{1, 3, 3, 2}), 1u);
  EXPECT_EQ(argmax_cell(Grid(2, 2, {0, 5, 5, 5})), (Cell{0, 1}));
  EXPECT_EQ(argmax_cell(Grid(2, 2, 1.0)), (Cell{0, 0}));
  EXPECT_DOUBLE_EQ(max_value(Grid(1, 3, {-1, -0.5, -2})), -0.5);
}

TEST(LogSigmoid, StableAtExtremes) {
  EXPECT_NEAR(log_sigmoid(0.0), -std::numbers::ln2, 1e-15);
  EXPECT_NEAR(log_sigmoid(-800.0), -800.0, 1e-9);
  EXPECT_NEAR(log_sigmoid(800.0), 0.0, 1e-300);
  EXPECT_TRUE(std::isfinite(log_sigmoid(-1e6)));
}

TEST(LogSumExp, MatchesDirectSum) {
  const DenseVector v{0.1, -2.0, 3.5};
  double direct = 0.0;
  for (double x : v) direct += std::exp(x);
  EXPECT_NEAR(log_sum_exp(v), std::log(direct), 1e-14);
  EXPECT_NEAR(log_sum_exp(DenseVector{1000.0, 1000.0}), 1000.0 + std::numbers::ln2, 1e-12);
}

TEST(FeatureMap, PatchLayout) {
  FeatureMap f(2, 1, 2, {1, 2, 3, 4});
  EXPECT_EQ(f.patch(0, 0), (DenseVector{1, 3}));
  EXPECT_EQ(f.patch(0, 1), (DenseVector{2, 4}));
  EXPECT_EQ(f.patches().size(), 2u);
}

}  // namespace
}  // namespace csr
