#include <gtest/gtest.h>

#include <cmath>

#include "cdt/optim.hpp"
#include "support/fd_check.hpp"

using namespace cdt;
using namespace cdt::optim;

TEST(Adam, ZeroGradientFromFreshStateLeavesParameters) {
  std::vector<Tensor> p{Tensor({3}, 0.5)}, g{Tensor({3})};
  auto st = AdamState::zeros_like(p);
  adam_update(p, g, st, {});
  for (double x : p[0].storage()) EXPECT_EQ(x, 0.5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  std::vector<Tensor> p{Tensor({1}, 0.0)}, g{Tensor({1}, 2.0)}, z{Tensor({1})};
  auto st = AdamState::zeros_like(p);
  adam_update(p, g, st, {});
  const double m1 = st.m[0].storage()[0], v1 = st.v[0].storage()[0];
  adam_update(p, z, st, {});
  EXPECT_DOUBLE_EQ(st.m[0].storage()[0], 0.9 * m1);
  EXPECT_DOUBLE_EQ(st.v[0].storage()[0], 0.95 * v1);
}

TEST(Adam, ScalarHandComputation) {
  // Step 1: m = 0.1 g, v = 0.05 g^2, corrected m/(1-0.9) = g, v/(1-0.95) = g^2,
  // so the update is lr * g / (|g| + eps).
  const double g0 = -0.3, lr = 1e-2, eps = 1e-8;
  std::vector<Tensor> p{Tensor({1}, 1.0)}, g{Tensor({1}, g0)};
  auto st = AdamState::zeros_like(p);
  AdamConfig c{lr, 0.9, 0.95, eps};
  adam_update(p, g, st, c);
  EXPECT_NEAR(p[0].storage()[0], 1.0 - lr * g0 / (std::abs(g0) + eps), 1e-15);

  // Step 2 with gradient 0.1, by hand.
  const double g1 = 0.1;
  g[0].storage()[0] = g1;
  const double m = 0.9 * 0.1 * g0 + 0.1 * g1;
  const double v = 0.95 * 0.05 * g0 * g0 + 0.05 * g1 * g1;
  const double expect = p[0].storage()[0] - lr * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.9025)) + eps);
  adam_update(p, g, st, c);
  EXPECT_NEAR(p[0].storage()[0], expect, 1e-15);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Tensor> p{Tensor({2})}, g{Tensor({3})};
  auto st = AdamState::zeros_like(p);
  EXPECT_THROW(adam_update(p, g, st, {}), DimensionError);
  std::vector<Tensor> g2{Tensor({2}), Tensor({2})};
  EXPECT_THROW(adam_update(p, g2, st, {}), DimensionError);
}

TEST(Adam, Deterministic) {
  Rng r1(4), r2(4);
  std::vector<Tensor> a{cdt::testing::random_tensor(r1, {4, 4})}, b{cdt::testing::random_tensor(r2, {4, 4})};
  auto sa = AdamState::zeros_like(a), sb = AdamState::zeros_like(b);
  for (int k = 0; k < 5; ++k) {
    std::vector<Tensor> ga{cdt::testing::random_tensor(r1, {4, 4})}, gb{cdt::testing::random_tensor(r2, {4, 4})};
    adam_update(a, ga, sa, {});
    adam_update(b, gb, sb, {});
  }
  EXPECT_EQ(a[0].storage(), b[0].storage());
}

TEST(Clip, RescalesOnlyAboveThreshold) {
  std::vector<Tensor> g{Tensor({2}), Tensor({1})};
  g[0].storage() = {3.0, 0.0};
  g[1].storage() = {4.0};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(g[0].storage()[0], 0.6);
  const auto before = g[1].storage();
  clip_global_norm(g, 2.0);
  EXPECT_EQ(g[1].storage(), before);
}

TEST(Quantize, RoundsThroughFloat) {
  std::vector<Tensor> t{Tensor({2})};
  t[0].storage() = {0.1, 1.0};
  quantize_f32(t);
  EXPECT_EQ(t[0].storage()[0], double(0.1f));
  EXPECT_EQ(t[0].storage()[1], 1.0);
}
