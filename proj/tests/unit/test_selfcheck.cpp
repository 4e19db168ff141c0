#include <gtest/gtest.h>

#include "hiper/selfcheck.hpp"

using namespace hiper;

TEST(GradientSuite, EveryCheckIsWithinTolerance) {
  const auto results = gradient_suite();
  EXPECT_GE(results.size(), 27u);
  for (const auto& r : results) EXPECT_LE(r.max_rel_error, kGradTolerance) << r.name;
}

TEST(GradientSuite, DetectsAMissingGradientPath) {
  // The second factor is a constant copy, so the tape sees half the true derivative.
  ScalarFn f = [](const Tensor& x) { return sum(mul(x, Tensor(x.shape(), x.values()))); };
  Rng rng(1);
  EXPECT_GT(grad_check(f, Tensor::randn({5}, rng)), 0.1);
}
