#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "hiper/gradcheck.hpp"
#include "hiper/tensor.hpp"

using namespace hiper;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Weighted sum so that every output coordinate gets a distinct upstream gradient.
Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, Tensor::randn(y.shape(), rng)));
}

Tensor rnd(Shape s, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, std);
}

}  // namespace

TEST(TensorOps, AddIsElementwise) {
  auto y = add(Tensor({2}, {1, 2}), Tensor({2}, {3, 4}));
  EXPECT_EQ(vals(y), (std::vector<double>{4, 6}));
}

TEST(TensorOps, IdentityTimesMatrixIsMatrix) {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto a = rnd({3, 5}, 1);
  EXPECT_EQ(vals(matmul(eye, a)), vals(a));
}

TEST(TensorOps, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensor({1, 4}, 0.0));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(TensorOps, ShapeMismatchNamesOpAndShapes) {
  try {
    add(Tensor({2}), Tensor({3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
  EXPECT_THROW(conv2d(Tensor({4, 4, 2}), Tensor({3, 3, 3, 1}), Tensor({1})), DimensionError);
  EXPECT_THROW(concat({Tensor({2, 2}), Tensor({3, 2})}, 1), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(TensorOps, MatmulMatchesNaiveLoopOnOddSizes) {
  for (auto [m, k, n] : {std::array<std::size_t, 3>{13, 17, 11}, {1, 5, 33}, {9, 1, 24}, {16, 40, 17}}) {
    auto a = rnd({m, k}, m * 7 + k), b = rnd({k, n}, n * 3 + 1);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a.at(i * k + p) * b.at(p * n + j);
        EXPECT_NEAR(c.at(i * n + j), s, 1e-12);
      }
  }
}

TEST(TensorOps, ConvMatchesDirectConvolution) {
  const std::size_t H = 5, W = 6, ci = 3, co = 4, k = 3;
  auto x = rnd({H, W, ci}, 1), w = rnd({k, k, ci, co}, 2), b = rnd({co}, 3);
  auto y = conv2d(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{H, W, co}));
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        double s = b.at(o);
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const long yy = static_cast<long>(i + dy) - 1, xx = static_cast<long>(j + dx) - 1;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
            for (std::size_t c = 0; c < ci; ++c)
              s += x.at((yy * W + xx) * ci + c) * w.at(((dy * k + dx) * ci + c) * co + o);
          }
        EXPECT_NEAR(y.at((i * W + j) * co + o), s, 1e-12);
      }
}

TEST(TensorOps, UpsampleOfConstantIsConstantAndPoolAverages) {
  auto up = upsample2x(Tensor({2, 2, 1}, 3.5));
  ASSERT_EQ(up.shape(), (Shape{4, 4, 1}));
  for (double v : up.data()) EXPECT_DOUBLE_EQ(v, 3.5);
  auto pooled = avg_pool2x(Tensor({2, 2, 1}, {1, 2, 3, 4}));
  ASSERT_EQ(pooled.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(pooled.at(0), 2.5);
}

TEST(TensorOps, SliceAndConcatRoundTrip) {
  auto x = rnd({3, 7}, 5);
  for (std::size_t cut = 0; cut <= 7; ++cut) {
    auto back = concat({slice(x, 1, 0, cut), slice(x, 1, cut, 7)}, 1);
    EXPECT_EQ(vals(back), vals(x));
  }
}

TEST(Backward, SquareGradient) {
  auto x = Tensor({1}, {3.0}).set_requires_grad(true);
  backward(mse(x, Tensor({1}, 0.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ProductRule) {
  auto a = Tensor({1}, {2.0}).set_requires_grad(true);
  auto b = Tensor({1}, {5.0}).set_requires_grad(true);
  backward(sum(mul(a, b)));
  EXPECT_DOUBLE_EQ(a.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  auto a = Tensor({2}, {1.0, -2.0}).set_requires_grad(true);
  backward(sum(add(a, mul(a, a))));  // d/da (a + a^2) = 1 + 2a
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], -3.0);
}

TEST(Backward, RandomThreeLayerCompositionMatchesFiniteDifferences) {
  auto w1 = rnd({4, 6}, 11, 0.5), b1 = rnd({6}, 12), w2 = rnd({6, 5}, 13, 0.5), b2 = rnd({5}, 14);
  auto w3 = rnd({5, 3}, 15, 0.5), b3 = rnd({3}, 16);
  auto f = [&](const Tensor& x) {
    auto h = silu(linear(x, w1, b1));
    h = softmax(linear(h, w2, b2));
    return probe_loss(linear(h, w3, b3));
  };
  EXPECT_LT(grad_check(f, rnd({2, 4}, 17)), 1e-4);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto a = rnd({2}, 1).set_requires_grad(true);
  auto y = scale(a, 2.0);
  EXPECT_THROW(backward(y), ContractError);
  Graph::current().clear();
}

TEST(Backward, EmptyGraphIsContractError) {
  Graph::current().clear();
  EXPECT_THROW(backward(Tensor::scalar(1.0)), ContractError);
}

TEST(Backward, ConsumesGraphAndClearsIntermediateGrads) {
  auto a = rnd({3}, 1).set_requires_grad(true);
  auto mid = scale(a, 3.0);
  backward(sum(mid));
  EXPECT_EQ(Graph::current().size(), 0u);
  EXPECT_FALSE(mid.has_grad());
  EXPECT_TRUE(a.has_grad());
}

TEST(Backward, OffPathLeafGetsNoGradient) {
  auto a = rnd({3}, 1).set_requires_grad(true);
  auto b = rnd({3}, 2).set_requires_grad(true);
  auto unused = scale(b, 2.0);
  backward(sum(scale(a, 2.0)));
  EXPECT_TRUE(!b.has_grad() || std::all_of(b.grad().begin(), b.grad().end(), [](double g) { return g == 0.0; }));
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto a = rnd({3}, 1).set_requires_grad(true);
  Graph::current().clear();
  {
    NoGradGuard guard;
    auto y = sum(scale(a, 2.0));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Graph::current().size(), 0u);
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](const Tensor& x) { return sum(mul(x, x)); };
  EXPECT_LT(grad_check(f, Tensor({3}, {1, 2, 3}), 1e-5), 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  auto f = [](const Tensor&) { return Tensor::scalar(4.0); };
  EXPECT_EQ(grad_check(f, Tensor({3}, {1, 2, 3})), 0.0);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  Tensor onehot({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) onehot.data()[i * 4 + (i * 3) % 4] = 1.0;
  auto f = [&](const Tensor& x) {
    // Negative probability mass on the labelled class of each row.
    auto p = softmax(x);
    return scale(sum(mul(onehot, p)), -1.0);
  };
  EXPECT_LT(grad_check(f, rnd({4, 4}, 3)), 1e-4);
}

TEST(GradCheck, NonFiniteValueIsNumericError) {
  auto f = [](const Tensor& x) { return scale(sum(x), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(grad_check(f, Tensor({2}, {1, 2})), NumericError);
}

// Every op kind, each differentiable input checked separately.
struct OpCase {
  const char* name;
  Shape shape;
  std::function<Tensor(const Tensor&)> f;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  auto other = rnd({3, 4}, 21), w = rnd({4, 5}, 22), bias = rnd({4}, 23);
  auto kern = rnd({3, 3, 2, 3}, 24, 0.5), kb = rnd({3}, 25), gamma = rnd({4}, 26), beta = rnd({4}, 27);
  auto img = rnd({4, 4, 2}, 28), gnx = rnd({3, 2, 4}, 29);
  std::vector<std::size_t> ids{2, 0, 2, 1};
  return {
      {"add", {3, 4}, [=](const Tensor& x) { return probe_loss(add(x, other)); }},
      {"sub", {3, 4}, [=](const Tensor& x) { return probe_loss(sub(other, x)); }},
      {"mul", {3, 4}, [=](const Tensor& x) { return probe_loss(mul(x, other)); }},
      {"mul_self", {3, 4}, [=](const Tensor& x) { return probe_loss(mul(x, x)); }},
      {"scale", {3, 4}, [=](const Tensor& x) { return probe_loss(scale(x, -1.7)); }},
      {"add_bias_x", {3, 4}, [=](const Tensor& x) { return probe_loss(add_bias(x, bias)); }},
      {"add_bias_b", {4}, [=](const Tensor& b) { return probe_loss(add_bias(other, b)); }},
      {"matmul_a", {3, 4}, [=](const Tensor& a) { return probe_loss(matmul(a, w)); }},
      {"matmul_b", {4, 5}, [=](const Tensor& b) { return probe_loss(matmul(other, b)); }},
      {"matmul_wide", {20, 9}, [=](const Tensor& a) { return probe_loss(matmul(a, transpose(a))); }},
      {"transpose", {3, 4}, [=](const Tensor& x) { return probe_loss(transpose(x)); }},
      {"conv2d_x", {4, 4, 2}, [=](const Tensor& x) { return probe_loss(conv2d(x, kern, kb)); }},
      {"conv2d_w", {3, 3, 2, 3}, [=](const Tensor& k) { return probe_loss(conv2d(img, k, kb)); }},
      {"conv2d_b", {3}, [=](const Tensor& b) { return probe_loss(conv2d(img, kern, b)); }},
      {"conv1x1", {1, 1, 2, 3}, [=](const Tensor& k) { return probe_loss(conv2d(img, k, kb)); }},
      {"softmax", {3, 4}, [=](const Tensor& x) { return probe_loss(softmax(x)); }},
      {"group_norm_x", {3, 2, 4}, [=](const Tensor& x) { return probe_loss(group_norm(x, gamma, beta, 2)); }},
      {"group_norm_gamma", {4}, [=](const Tensor& g) { return probe_loss(group_norm(gnx, g, beta, 2)); }},
      {"group_norm_beta", {4}, [=](const Tensor& b) { return probe_loss(group_norm(gnx, gamma, b, 2)); }},
      {"silu", {3, 4}, [=](const Tensor& x) { return probe_loss(silu(x)); }},
      {"upsample", {2, 3, 2}, [=](const Tensor& x) { return probe_loss(upsample2x(x)); }},
      {"avg_pool", {4, 4, 2}, [=](const Tensor& x) { return probe_loss(avg_pool2x(x)); }},
      {"reshape", {3, 4}, [=](const Tensor& x) { return probe_loss(reshape(x, {2, 6})); }},
      {"slice", {3, 4}, [=](const Tensor& x) { return probe_loss(slice(x, 1, 1, 3)); }},
      {"concat", {3, 4}, [=](const Tensor& x) { return probe_loss(concat({other, x, x}, 1)); }},
      {"gather_columns", {2, 3}, [=](const Tensor& t) { return probe_loss(gather_columns(t, ids)); }},
      {"sum", {3, 4}, [=](const Tensor& x) { return scale(sum(mul(x, x)), 0.5); }},
      {"mean", {3, 4}, [=](const Tensor& x) { return mean(mul(x, other)); }},
      {"mse", {3, 4}, [=](const Tensor& x) { return mse(x, other); }},
  };
}

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto cases = op_cases();
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  SCOPED_TRACE(c.name);
  EXPECT_LT(grad_check(c.f, rnd(c.shape, 100 + GetParam())), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, OpGradient, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(TensorProperties, BackwardIsLinear) {
  auto x0 = rnd({3, 4}, 41);
  auto w = rnd({4, 4}, 42);
  auto f = [&](const Tensor& x) { return sum(silu(matmul(x, w))); };
  auto g = [&](const Tensor& x) { return mean(softmax(x)); };
  auto grad_of = [&](auto&& fn) {
    auto x = x0.clone().set_requires_grad(true);
    backward(fn(x));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const double a = 0.7, b = -2.3;
  auto gf = grad_of(f), gg = grad_of(g);
  auto gc = grad_of([&](const Tensor& x) { return add(scale(f(x), a), scale(g(x), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(TensorProperties, IdenticalInputsGiveIdenticalBits) {
  auto run = [] {
    auto x = rnd({6, 6, 4}, 7).set_requires_grad(true);
    auto k = rnd({3, 3, 4, 8}, 8);
    auto y = group_norm(conv2d(x, k, Tensor({8}, 0.1)), Tensor({8}, 1.0), Tensor({8}, 0.0), 4);
    auto loss = mean(softmax(reshape(y, {36, 8})));
    const double v = loss.item();
    backward(loss);
    auto out = std::vector<double>(x.grad().begin(), x.grad().end());
    out.push_back(v);
    return out;
  };
  auto r1 = run(), r2 = run();
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(r1[i]), std::bit_cast<std::uint64_t>(r2[i]));
}

TEST(TensorProperties, GradLengthMatchesData) {
  auto x = rnd({2, 5}, 3).set_requires_grad(true);
  backward(probe_loss(softmax(x)));
  EXPECT_EQ(x.grad().size(), x.size());
}
