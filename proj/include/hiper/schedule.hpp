#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hiper/errors.hpp"
#include "hiper/tensor.hpp"

namespace hiper {

enum class ScheduleKind { linear };

// DDPM tables, 1-based in t. alpha_bar(0) == 1, so sigma(1) == 0.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  std::size_t steps() const { return beta_.size(); }

  double beta(std::size_t t) const { return beta_[index(t)]; }
  double alpha(std::size_t t) const { return alpha_[index(t)]; }
  double sigma(std::size_t t) const { return sigma_[index(t)]; }
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw IndexError("alpha_bar: t=" + std::to_string(t) + " outside [0," + std::to_string(steps()) + "]");
    return alpha_bar_[t];
  }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  const std::vector<double>& sigmas() const { return sigma_; }

  void check_step(std::size_t t) const { (void)index(t); }

  // Builds the tables from an explicit beta sequence (t = 1..T).
  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ParameterError("schedule: need at least one step");
    NoiseSchedule s;
    s.beta_ = std::move(betas);
    const std::size_t T = s.beta_.size();
    s.alpha_.resize(T);
    s.alpha_bar_.assign(T + 1, 1.0);
    s.sigma_.resize(T);
    for (std::size_t i = 0; i < T; ++i) {
      const double b = s.beta_[i];
      if (!(b > 0.0 && b < 1.0)) throw ParameterError("schedule: beta must lie in (0,1)");
      s.alpha_[i] = 1.0 - b;
      s.alpha_bar_[i + 1] = s.alpha_bar_[i] * s.alpha_[i];
    }
    for (std::size_t t = 1; t <= T; ++t)
      s.sigma_[t - 1] = std::sqrt((1.0 - s.alpha_bar_[t - 1]) / (1.0 - s.alpha_bar_[t]) * s.beta_[t - 1]);
    return s;
  }

 private:
  std::size_t index(std::size_t t) const {
    if (t < 1 || t > steps())
      throw IndexError("schedule: step t=" + std::to_string(t) + " outside [1," + std::to_string(steps()) + "]");
    return t - 1;
  }

  std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
};

inline NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::linear) {
  (void)kind;
  if (T < 1) throw ParameterError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("make_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(T);
  for (std::size_t t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    betas[t - 1] = beta_start + frac * (beta_end - beta_start);
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x0.shape() != eps.shape())
    throw DimensionError("forward_diffuse: shape mismatch " + shape_str(x0.shape()) + " vs " + shape_str(eps.shape()));
  const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a * x0.data()[i] + b * eps.data()[i];
  return out;
}

// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(1 - beta_t) + sigma_t * noise
inline Tensor reverse_step(const Tensor& xt, std::size_t t, const Tensor& eps_pred, const NoiseSchedule& sched,
                           const Tensor& noise) {
  sched.check_step(t);
  if (xt.shape() != eps_pred.shape())
    throw DimensionError("reverse_step: shape mismatch " + shape_str(xt.shape()) + " vs " + shape_str(eps_pred.shape()));
  if (xt.shape() != noise.shape())
    throw DimensionError("reverse_step: shape mismatch " + shape_str(xt.shape()) + " vs " + shape_str(noise.shape()));
  const double inv = 1.0 / std::sqrt(1.0 - sched.beta(t));
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sig = sched.sigma(t);
  Tensor out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = inv * (xt.data()[i] - coef * eps_pred.data()[i]) + sig * noise.data()[i];
  return out;
}

// Noise prediction consistent with the implied x0 clamped to [-bound, bound].
// Feeding it to reverse_step gives the posterior mean of the clamped x0; when
// nothing is clamped it returns eps_pred unchanged.
inline Tensor clamp_eps(const Tensor& xt, std::size_t t, const Tensor& eps_pred, const NoiseSchedule& sched,
                        double bound) {
  sched.check_step(t);
  if (xt.shape() != eps_pred.shape())
    throw DimensionError("clamp_eps: shape mismatch " + shape_str(xt.shape()) + " vs " + shape_str(eps_pred.shape()));
  const double sa = std::sqrt(sched.alpha_bar(t)), sb = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out = eps_pred.clone();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (xt.data()[i] - sb * eps_pred.data()[i]) / sa;
    if (x0 > bound || x0 < -bound) out.data()[i] = (xt.data()[i] - sa * std::clamp(x0, -bound, bound)) / sb;
  }
  return out;
}

}  // namespace hiper
