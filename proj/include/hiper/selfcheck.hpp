#pragma once

// Finite-difference checks of every differentiable op and of the tail-only
// personalization loss, shared by the CLI and the acceptance suite.

#include <string>
#include <vector>

#include "hiper/gradcheck.hpp"
#include "hiper/pipeline.hpp"
#include "hiper/schedule.hpp"
#include "hiper/tensor.hpp"
#include "hiper/text.hpp"

namespace hiper {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

inline Tensor seeded(Shape s, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed, 0x6C4);
  return Tensor::randn(std::move(s), rng, std);
}

// Contracts an op output with fixed random weights so every output element
// contributes a distinct term.
inline Tensor contract(const Tensor& y) { return sum(mul(y, seeded(y.shape(), 99))); }

struct GradCase {
  const char* name;
  Shape shape;
  ScalarFn f;
};

inline std::vector<GradCase> op_cases() {
  auto other = seeded({3, 4}, 1), w = seeded({4, 5}, 2), bias = seeded({4}, 3);
  auto kern = seeded({3, 3, 2, 3}, 4, 0.5), kb = seeded({3}, 5), gamma = seeded({4}, 6), beta = seeded({4}, 7);
  auto img = seeded({4, 4, 2}, 8), gnx = seeded({3, 2, 4}, 9);
  std::vector<std::size_t> ids{2, 0, 2, 1};
  return {
      {"add", {3, 4}, [=](const Tensor& x) { return contract(add(x, other)); }},
      {"sub", {3, 4}, [=](const Tensor& x) { return contract(sub(other, x)); }},
      {"mul", {3, 4}, [=](const Tensor& x) { return contract(mul(x, x)); }},
      {"scale", {3, 4}, [=](const Tensor& x) { return contract(scale(x, -1.7)); }},
      {"add_bias", {3, 4}, [=](const Tensor& x) { return contract(add_bias(x, bias)); }},
      {"add_bias.bias", {4}, [=](const Tensor& b) { return contract(add_bias(other, b)); }},
      {"silu", {3, 4}, [=](const Tensor& x) { return contract(silu(x)); }},
      {"matmul.lhs", {3, 4}, [=](const Tensor& a) { return contract(matmul(a, w)); }},
      {"matmul.rhs", {4, 5}, [=](const Tensor& b) { return contract(matmul(other, b)); }},
      {"transpose", {3, 4}, [=](const Tensor& x) { return contract(transpose(x)); }},
      {"conv2d.input", {4, 4, 2}, [=](const Tensor& x) { return contract(conv2d(x, kern, kb)); }},
      {"conv2d.kernel", {3, 3, 2, 3}, [=](const Tensor& k) { return contract(conv2d(img, k, kb)); }},
      {"conv2d.bias", {3}, [=](const Tensor& b) { return contract(conv2d(img, kern, b)); }},
      {"softmax", {3, 4}, [=](const Tensor& x) { return contract(softmax(x)); }},
      {"group_norm.input", {3, 2, 4}, [=](const Tensor& x) { return contract(group_norm(x, gamma, beta, 2)); }},
      {"group_norm.gamma", {4}, [=](const Tensor& g) { return contract(group_norm(gnx, g, beta, 2)); }},
      {"group_norm.beta", {4}, [=](const Tensor& b) { return contract(group_norm(gnx, gamma, b, 2)); }},
      {"upsample2x", {2, 3, 2}, [=](const Tensor& x) { return contract(upsample2x(x)); }},
      {"avg_pool2x", {4, 4, 2}, [=](const Tensor& x) { return contract(avg_pool2x(x)); }},
      {"reshape", {3, 4}, [=](const Tensor& x) { return contract(reshape(x, {2, 6})); }},
      {"slice", {3, 4}, [=](const Tensor& x) { return contract(slice(x, 1, 1, 3)); }},
      {"concat", {3, 4}, [=](const Tensor& x) { return contract(concat({other, x}, 1)); }},
      {"gather_columns", {2, 3}, [=](const Tensor& t) { return contract(gather_columns(t, ids)); }},
      {"sum", {3, 4}, [=](const Tensor& x) { return sum(mul(x, other)); }},
      {"mean", {3, 4}, [=](const Tensor& x) { return mean(mul(x, other)); }},
      {"mse", {3, 4}, [=](const Tensor& x) { return mse(x, other); }},
  };
}

}  // namespace detail

// Gradient of one personalization step's loss with respect to the tail, on a
// small randomly initialized pipeline with fixed t and noise.
inline GradCheckResult check_personalization_loss() {
  RunConfig rc;
  rc.model.ch1 = 8;
  rc.model.ch2 = 16;
  rc.model.groups = 4;
  rc.model.time_dim = 8;
  rc.model.temb_dim = 16;
  rc.model.embed_dim = 6;
  rc.model.tokens = 6;
  rc.model.steps = 20;
  Vocab vocab({"a", "red", "square"});
  Pipeline pl = make_pipeline(rc, 8, vocab);
  pl.freeze();
  const Tensor head = split_embedding(pl.encode("a red square"), 3).head;
  const Tensor x0 = detail::seeded({8, 8, 3}, 11, 0.5), eps = detail::seeded({8, 8, 3}, 12);
  const std::size_t t = 7;
  const Tensor xt = forward_diffuse(x0, t, eps, pl.schedule);
  ScalarFn loss = [&](const Tensor& tail) {
    return mse(eps, denoise(xt, t, concat({head, tail}, 1), pl.params, pl.model).eps);
  };
  return {"personalization_loss.tail", grad_check(loss, detail::seeded({6, 3}, 13))};
}

inline std::vector<GradCheckResult> gradient_suite() {
  std::vector<GradCheckResult> out;
  std::uint64_t seed = 100;
  for (const auto& c : detail::op_cases()) out.push_back({c.name, grad_check(c.f, detail::seeded(c.shape, seed++))});
  out.push_back(check_personalization_loss());
  return out;
}

}  // namespace hiper
