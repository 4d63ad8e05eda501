#pragma once

// Test-side finite-difference check for losses over named parameters.
// `loss_fn` must rebuild the loss from current parameter values; gradients
// are taken from one backward pass and compared against central differences
// coordinate by coordinate.
//
// Central differences at eps on a 64-bit loss of magnitude L carry noise of
// about L * 2^-52 / eps in the derivative, so the per-coordinate error uses
// an absolute floor at that scale; a pure relative ratio would flag noise on
// near-zero gradients that no finite-difference method can resolve.

#include <cmath>
#include <functional>
#include <vector>

#include "stylet/nn.hpp"

namespace testutil {

inline double model_grad_check(const std::function<double()>& loss_value,
                               const std::function<void()>& backward_into_grads,
                               const std::vector<stylet::nn::Param*>& params,
                               double eps = 1e-5) {
  stylet::nn::zero_grads(params);
  backward_into_grads();
  std::vector<std::vector<double>> analytic;
  for (stylet::nn::Param* p : params) analytic.push_back(p->grad);

  double floor = 1e-6 * std::max(1.0, std::fabs(loss_value()));
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    stylet::nn::Param* p = params[pi];
    for (size_t i = 0; i < p->value.size(); ++i) {
      double keep = p->value[i];
      p->value[i] = keep + eps;
      double up = loss_value();
      p->value[i] = keep - eps;
      double dn = loss_value();
      p->value[i] = keep;
      double numeric = (up - dn) / (2.0 * eps);
      double err = std::fabs(analytic[pi][i] - numeric) /
                   (std::fabs(analytic[pi][i]) + std::fabs(numeric) + floor);
      worst = std::max(worst, err);
    }
  }
  stylet::nn::zero_grads(params);
  return worst;
}

}  // namespace testutil
