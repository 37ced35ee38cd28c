#include <gtest/gtest.h>

#include "gcnet/gradcheck.hpp"
#include "support.hpp"

using namespace gcnet;
using namespace gcnet::testing;

TEST(Tensor, ReshapeKeepsDataAndRejectsBadCounts) {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0f);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>({2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>({-1}), ShapeError);
}

TEST(Rng, DerivedStreamsDifferAndRepeat) {
  EXPECT_EQ(derive_seed(3, 1), derive_seed(3, 1));
  EXPECT_NE(derive_seed(3, 1), derive_seed(3, 2));
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) {
    const auto v = a.uniform_int(-3, 3);
    EXPECT_EQ(v, b.uniform_int(-3, 3));
    EXPECT_GE(v, -3);
    EXPECT_LE(v, 3);
  }
}

TEST(Conv2d, MatchesSlidingWindowReference) {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const Index ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const Index kh = 2 * rng.uniform_int(0, 1) + 1, kw = 2 * rng.uniform_int(0, 1) + 1;
    const Index stride = rng.uniform_int(1, 2), h = rng.uniform_int(3, 7), w = rng.uniform_int(3, 7);
    auto x = random_var<double>({2, ci, h, w}, rng);
    auto wt = random_var<double>({co, ci, kh, kw}, rng);
    auto b = random_var<double>({co}, rng);
    ops::ConvGeometry geo{stride, stride, kh / 2, kw / 2};
    auto y = ops::conv2d(x, wt, b, geo);
    auto ref = ref_conv(x.value(), wt.value(), b.value(), stride, kh / 2, kw / 2);
    ASSERT_LT(max_abs_error(y.value(), ref), 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Rng rng(2);
  auto x = random_var<double>({1, 2, 4, 4}, rng);
  auto w = random_var<double>({1, 3, 3, 3}, rng);
  auto b = random_var<double>({1}, rng);
  EXPECT_THROW(ops::conv2d(x, w, b, ops::same_padding(3, 3)), ShapeError);
}

TEST(Linear, MatchesAffineReference) {
  Rng rng(3);
  auto x = random_var<double>({4, 5}, rng);
  auto w = random_var<double>({3, 5}, rng);
  auto b = random_var<double>({3}, rng);
  auto y = ops::linear(x, w, b);
  for (Index r = 0; r < 4; ++r) {
    std::vector<double> row(x.value().data() + r * 5, x.value().data() + r * 5 + 5);
    auto ref = ref_affine(w.value(), b.value(), row);
    for (Index o = 0; o < 3; ++o) EXPECT_NEAR(y.value().at(r, o), ref[static_cast<std::size_t>(o)], 1e-14);
  }
}

TEST(Softmax, RowsSumToOneAndMatchReference) {
  Rng rng(4);
  auto x = random_var<double>({5, 7}, rng, -20, 20);
  auto y = ops::softmax_last(x);
  for (Index r = 0; r < 5; ++r) {
    std::vector<double> row(x.value().data() + r * 7, x.value().data() + r * 7 + 7);
    auto ref = ref_softmax(row);
    double s = 0;
    for (Index j = 0; j < 7; ++j) {
      EXPECT_NEAR(y.value().at(r, j), ref[static_cast<std::size_t>(j)], 1e-14);
      s += y.value().at(r, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Silu, PointValues) {
  auto x = Var<double>::leaf(Tensor<double>({3}, std::vector<double>{-2, 0, 1.5}));
  auto y = ops::silu(x);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], ref_silu(x.value()[i]), 1e-15);
}

TEST(Relu, ClampsNegativesAndKeepsNaN) {
  auto x = Var<double>::leaf(Tensor<double>({4}, std::vector<double>{-2, 0, 3, std::nan("")}), true);
  auto y = ops::relu(x);
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 0.0);
  EXPECT_EQ(y.value()[2], 3.0);
  EXPECT_TRUE(std::isnan(y.value()[3]));
}

TEST(BatchNorm, EvalModeUsesFrozenStatistics) {
  Rng rng(5);
  auto x = random_var<double>({2, 3, 2, 2}, rng);
  auto gamma = random_var<double>({3}, rng, 0.5, 1.5);
  auto beta = random_var<double>({3}, rng);
  ops::NormStats<double> stats{random_tensor<double>({3}, rng), random_tensor<double>({3}, rng, 0.5, 2)};
  auto y = ops::batch_norm2d(x, gamma, beta, stats, false);
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) {
          const double ref = (x.value().at(b, c, i, j) - stats.running_mean[c]) /
                                 std::sqrt(stats.running_var[c] + 1e-5) * gamma.value()[c] +
                             beta.value()[c];
          EXPECT_NEAR(y.value().at(b, c, i, j), ref, 1e-12);
        }
}

TEST(BatchNorm, TrainModeNormalisesAndUpdatesRunningStats) {
  Rng rng(6);
  auto x = random_var<double>({3, 2, 3, 3}, rng, -2, 4);
  auto gamma = Var<double>::leaf(Tensor<double>({2}, 1.0));
  auto beta = Var<double>::leaf(Tensor<double>({2}));
  ops::NormStats<double> stats{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
  auto y = ops::batch_norm2d(x, gamma, beta, stats, true);
  for (Index c = 0; c < 2; ++c) {
    double mean = 0, ym = 0, yv = 0;
    const double n = 27;
    for (Index b = 0; b < 3; ++b)
      for (Index i = 0; i < 9; ++i) {
        mean += x.value()[(b * 2 + c) * 9 + i] / n;
        ym += y.value()[(b * 2 + c) * 9 + i] / n;
      }
    for (Index b = 0; b < 3; ++b)
      for (Index i = 0; i < 9; ++i) yv += std::pow(y.value()[(b * 2 + c) * 9 + i] - ym, 2) / n;
    EXPECT_NEAR(ym, 0, 1e-12);
    EXPECT_NEAR(yv, 1, 1e-3);
    EXPECT_NEAR(stats.running_mean[c], 0.1 * mean, 1e-12);
  }
}

TEST(BilinearResize, IdentityConstantAndHalfPixelTaps) {
  Rng rng(7);
  auto x = random_var<double>({1, 2, 3, 5}, rng);
  EXPECT_EQ(ops::bilinear_resize(x, 3, 5).value(), x.value());

  auto c = Var<double>::leaf(Tensor<double>({1, 1, 3, 3}, 0.25));
  auto up = ops::bilinear_resize(c, 7, 4);
  for (double v : up.value().values()) EXPECT_NEAR(v, 0.25, 1e-15);

  auto row = Var<double>::leaf(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.0, 1.0}));
  auto wide = ops::bilinear_resize(row, 1, 4);
  const std::vector<double> expect{0.0, 0.25, 0.75, 1.0};
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(wide.value()[i], expect[static_cast<std::size_t>(i)], 1e-15);
}

TEST(Losses, SquaredAndAbsoluteErrorsAreBatchMeans) {
  auto p = Var<double>::leaf(Tensor<double>({2}, std::vector<double>{4, 0}));
  const Tensor<double> t({2}, std::vector<double>{3, 3});
  EXPECT_DOUBLE_EQ(ops::squared_error(p, t).value()[0], 5.0);
  EXPECT_DOUBLE_EQ(ops::absolute_error(p, t).value()[0], 2.0);
  EXPECT_THROW(ops::squared_error(p, Tensor<double>({3})), ShapeError);
}

TEST(Autograd, NoGradGuardBuildsNoGraph) {
  auto x = Var<double>::leaf(Tensor<double>({2}, 1.0), true);
  {
    NoGradGuard guard;
    auto y = ops::scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(ops::scale(x, 2.0).requires_grad());
}

TEST(Autograd, SharedInputAccumulatesBothPaths) {
  auto x = Var<double>::leaf(Tensor<double>({1}, 3.0), true);
  auto y = ops::add(ops::scale(x, 2.0), ops::scale(x, 5.0));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

// Finite-difference checks of the primitive backward rules.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{11};
  Var<double> leaf(Shape s) { return Var<double>::leaf(random_tensor<double>(std::move(s), rng), true); }
  void expect_ok(const GradCheckResult& r) { EXPECT_LT(r.max_rel_error, 1e-6) << r.worst; }
};

TEST_F(OpGradient, Conv2dStrided) {
  auto x = leaf({2, 2, 5, 5}), w = leaf({3, 2, 3, 3}), b = leaf({3});
  const auto c = random_tensor<double>({2, 3, 3, 3}, rng);
  expect_ok(gradient_check({{"x", &x}, {"w", &w}, {"b", &b}}, [&] {
    return detail::weighted_sum(ops::conv2d(x, w, b, ops::ConvGeometry{2, 2, 1, 1}), c);
  }));
}

TEST_F(OpGradient, BatchNormTrainMode) {
  auto x = leaf({2, 2, 3, 3}), g = leaf({2}), b = leaf({2});
  const auto c = random_tensor<double>({2, 2, 3, 3}, rng);
  ops::NormStats<double> stats{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
  expect_ok(gradient_check({{"x", &x}, {"gamma", &g}, {"beta", &b}}, [&] {
    return detail::weighted_sum(ops::batch_norm2d(x, g, b, stats, true), c);
  }));
}

TEST_F(OpGradient, BilinearSoftmaxSilu) {
  auto x = leaf({1, 2, 3, 4});
  const auto c = random_tensor<double>({1, 2, 5, 7}, rng);
  expect_ok(gradient_check({{"x", &x}}, [&] {
    return detail::weighted_sum(ops::softmax_last(ops::silu(ops::bilinear_resize(x, 5, 7))), c);
  }));
}

TEST_F(OpGradient, SpatialMeanAndBatchMean) {
  auto x = leaf({2, 3, 2, 2});
  const auto c = random_tensor<double>({2, 3}, rng);
  const auto d = random_tensor<double>({2}, rng);
  expect_ok(gradient_check({{"x", &x}}, [&] {
    return ops::add(detail::weighted_sum(ops::mean_spatial(x), c), detail::weighted_sum(ops::mean_per_batch(x), d));
  }));
}
