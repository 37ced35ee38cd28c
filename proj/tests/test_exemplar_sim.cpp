#include <gtest/gtest.h>

#include "support.hpp"

using namespace gcnet;
using namespace gcnet::testing;

namespace {

ExemplarFeatureGrid<double> grid_of(Tensor<double> t) { return {Var<double>::leaf(std::move(t))}; }

}  // namespace

TEST(Unfold, PatchCountForDefaultGrid) {
  auto p = unfold_patches(grid_of(Tensor<double>({1, 2, 32, 32})), 8, 1);
  EXPECT_EQ(p.count(), 625);
  EXPECT_EQ(p.kernel(), 8);
}

TEST(Unfold, KernelCoveringGridReturnsTheGrid) {
  Rng rng(1);
  const auto g = random_tensor<double>({1, 3, 4, 4}, rng);
  auto p = unfold_patches(grid_of(g), 4, 1);
  ASSERT_EQ(p.count(), 1);
  EXPECT_EQ(p.data.value().reshaped(g.shape()), g);
}

TEST(Unfold, MatchesNestedLoopExtraction) {
  Rng rng(2);
  for (Index stride : {1, 2}) {
    const auto g = random_tensor<double>({2, 3, 5, 5}, rng);
    auto p = unfold_patches(grid_of(g), 3, stride);
    EXPECT_EQ(max_abs_error(p.data.value(), ref_unfold(g, 3, stride)), 0.0);
  }
}

TEST(Unfold, RejectsBadGeometry) {
  auto g = grid_of(Tensor<double>({1, 2, 4, 4}));
  EXPECT_THROW(unfold_patches(g, 5, 1), GeometryError);
  EXPECT_THROW(unfold_patches(g, 2, 0), GeometryError);
  EXPECT_THROW(unfold_patches(grid_of(Tensor<double>({1, 2, 4, 5})), 2, 1), ShapeError);
}

TEST(Average, ConstantGridGivesConstantPatch) {
  auto avg = average_patches(unfold_patches(grid_of(Tensor<double>({1, 2, 6, 6}, 1.75)), 3, 1));
  for (double v : avg.data.value().values()) EXPECT_DOUBLE_EQ(v, 1.75);
}

TEST(Average, SinglePatchIsReturnedUnchanged) {
  Rng rng(3);
  const auto g = random_tensor<double>({1, 2, 3, 3}, rng);
  auto avg = average_patches(unfold_patches(grid_of(g), 3, 1));
  EXPECT_EQ(avg.data.value(), g);
}

TEST(Average, MatchesAccumulationLoop) {
  Rng rng(4);
  const auto g = random_tensor<double>({2, 3, 5, 5}, rng);
  auto avg = average_patches(unfold_patches(grid_of(g), 3, 1));
  EXPECT_LT(max_abs_error(avg.data.value(), ref_average(ref_unfold(g, 3, 1))), 1e-6);
}

TEST(Average, UnfoldThenAverageIsLinear) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>({1, 2, 6, 6}, rng), y = random_tensor<double>({1, 2, 6, 6}, rng);
    const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);
    Tensor<double> mix(x.shape());
    for (Index i = 0; i < x.numel(); ++i) mix[i] = a * x[i] + b * y[i];
    auto f = [](const Tensor<double>& t) { return average_patches(unfold_patches(grid_of(t), 4, 1)).data.value(); };
    const auto fx = f(x), fy = f(y), fm = f(mix);
    for (Index i = 0; i < fm.numel(); ++i) ASSERT_NEAR(fm[i], a * fx[i] + b * fy[i], 1e-6);
  }
}

TEST(Tokenize, KernelEightGivesSixteenTokens) {
  Rng rng(6);
  TokenProjectionParams<double> proj(4 * 3, 3, rng);
  ExemplarPatch<double> patch{Var<double>::leaf(Tensor<double>({1, 3, 8, 8}))};
  auto tok = tokenize_exemplar(patch, proj);
  EXPECT_EQ(tok.tokens.shape(), (Shape{1, 16, 3}));
}

TEST(Tokenize, ConstantPatchGivesEqualTokens) {
  Rng rng(7);
  const Index c = 2;
  TokenProjectionParams<double> proj(4 * c, c, rng);
  // Identity-like projection: token channel k reads channel k of the top-left tap.
  proj.weight.mutable_value().fill(0);
  for (Index k = 0; k < c; ++k) proj.weight.mutable_value().at(k, k * 4) = 1;
  ExemplarPatch<double> patch{Var<double>::leaf(Tensor<double>({1, c, 8, 8}, 0.6))};
  auto tok = tokenize_exemplar(patch, proj).tokens.value();
  ASSERT_EQ(tok.dim(1), 16);
  for (Index t = 0; t < 16; ++t)
    for (Index k = 0; k < c; ++k) EXPECT_DOUBLE_EQ(tok.at(0, t, k), 0.6);
}

TEST(Tokenize, MatchesSliceFlattenMatmul) {
  Rng rng(8);
  const Index c = 3;
  TokenProjectionParams<double> proj(4 * c, c, rng);
  proj.bias.mutable_value() = random_tensor<double>({c}, rng);
  const auto p = random_tensor<double>({2, c, 8, 8}, rng);
  auto tok = tokenize_exemplar(ExemplarPatch<double>{Var<double>::leaf(p)}, proj);
  EXPECT_LT(max_abs_error(tok.tokens.value(), ref_tokenize(p, proj.weight.value(), proj.bias.value(), 2)), 1e-12);
}

TEST(Tokenize, RejectsOddPatchSide) {
  Rng rng(9);
  TokenProjectionParams<double> proj(4, 1, rng);
  ExemplarPatch<double> patch{Var<double>::leaf(Tensor<double>({1, 1, 3, 3}))};
  EXPECT_THROW(tokenize_exemplar(patch, proj), GeometryError);
}

TEST(Simulator, TokenCountFollowsConfig) {
  const auto cfg = ModelConfig::tiny();
  Rng rng(10);
  TokenProjectionParams<double> proj(4 * cfg.channels, cfg.channels, rng);
  auto tok = simulate_exemplar(grid_of(random_tensor<double>({1, 8, 8, 8}, rng)), proj, cfg);
  EXPECT_EQ(tok.count(), cfg.token_count());
  EXPECT_EQ(tok.count(), 4);
}
