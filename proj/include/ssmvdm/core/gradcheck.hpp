#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ssmvdm/core/autodiff.hpp"

namespace ssmvdm {

// Relative error with a floor so finite-difference roundoff on near-zero
// entries is not amplified into spurious failures.
inline double grad_rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1e-3, std::abs(a), std::abs(n)});
}

// Central-difference check of d(loss)/d(param) for every element of every
// parameter. `make_loss` must rebuild the graph from the current parameter
// values; parameters are perturbed in place. Meant for double precision.
// A nonzero `grad_bias` deliberately skews one analytic entry, simulating a
// broken backward so harnesses can prove the comparison catches it.
template <typename S, typename MakeLoss>
double max_grad_rel_err(std::vector<Var<S>>& params, MakeLoss make_loss, S h = S(1e-5),
                        S grad_bias = S(0)) {
  for (auto& p : params) p.zero_grad();
  backward(make_loss());
  std::vector<Tensor<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad().clone());
  if (grad_bias != S(0) && !analytic.empty() && analytic[0].numel() > 0)
    analytic[0][0] += grad_bias;

  double worst = 0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S>& t = params[pi].value();
    for (Index i = 0; i < t.numel(); ++i) {
      const S orig = t[i];
      t[i] = orig + h;
      const double lp = static_cast<double>(make_loss().value().item());
      t[i] = orig - h;
      const double lm = static_cast<double>(make_loss().value().item());
      t[i] = orig;
      const double fd = (lp - lm) / (2.0 * static_cast<double>(h));
      worst = std::max(worst, grad_rel_err(static_cast<double>(analytic[pi][i]), fd));
    }
  }
  return worst;
}

}  // namespace ssmvdm
