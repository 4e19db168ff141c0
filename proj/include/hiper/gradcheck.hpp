#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "hiper/tensor.hpp"

namespace hiper {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with the
// numeric derivative taken by central differences of step h.
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  Tensor probe = x.clone().set_requires_grad(true);
  Graph::current().clear();
  Tensor y = f(probe);
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");

  std::vector<double> analytic(x.size(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  } else {
    Graph::current().clear();
  }

  NoGradGuard no_grad;
  Tensor shifted = x.clone();
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = shifted.data()[i];
    shifted.data()[i] = orig + h;
    const double fp = f(shifted).item();
    shifted.data()[i] = orig - h;
    const double fm = f(shifted).item();
    shifted.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hiper
