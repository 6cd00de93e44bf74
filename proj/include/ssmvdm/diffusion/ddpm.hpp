#pragma once

#include <cmath>
#include <vector>

#include "ssmvdm/core/autodiff.hpp"
#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/rng.hpp"
#include "ssmvdm/diffusion/schedule.hpp"

namespace ssmvdm {

template <typename S>
struct DiffusionBatch {
  Tensor<S> x0;          // (B, L, C, H, W), values in [-1, 1]
  std::vector<Index> t;  // per-sample step, extent B
  Tensor<S> eps;         // same shape as x0
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per batch sample.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, const std::vector<Index>& t, const Tensor<S>& eps,
                   const NoiseSchedule<S>& sched) {
  check_same_shape(x0, eps, "q_sample");
  check_finite(x0, "q_sample(x0)");
  check_finite(eps, "q_sample(eps)");
  const Index B = x0.extent(0);
  if (static_cast<Index>(t.size()) != B && t.size() != 1)
    throw ShapeError("q_sample: need one step per sample or a single shared step");
  const Index per = x0.numel() / B;
  Tensor<S> xt = Tensor<S>::empty(x0.shape());
  for (Index b = 0; b < B; ++b) {
    const Index tb = t[t.size() == 1 ? 0 : static_cast<std::size_t>(b)];
    const S ab = sched.alpha_bar_at(tb);
    const S c0 = std::sqrt(ab), ce = std::sqrt(S(1) - ab);
    typename Tensor<S>::ConstFlat x0b(x0.data() + b * per, per);
    typename Tensor<S>::ConstFlat epb(eps.data() + b * per, per);
    typename Tensor<S>::Flat xtb(xt.data() + b * per, per);
    xtb = c0 * x0b + ce * epb;
  }
  return xt;
}

// Mean squared error between the true eps and the model's prediction on the
// corrupted batch. `model(x_t, t)` must return a Var of x0's shape.
template <typename S, typename Model>
Var<S> eps_loss(Model&& model, const DiffusionBatch<S>& batch, const NoiseSchedule<S>& sched) {
  Tensor<S> xt = q_sample(batch.x0, batch.t, batch.eps, sched);
  Var<S> eps_hat = model(xt, batch.t);
  if (!eps_hat.value().same_shape(batch.x0))
    throw ShapeError("eps_loss: model output " + shape_str(eps_hat.shape()) + " vs target " +
                     shape_str(batch.x0.shape()));
  return mse(eps_hat, make_const(batch.eps));
}

// One ancestral reverse step: x_{t-1} from x_t and the predicted noise.
// Noise is skipped at t = 1 so the final step is deterministic.
template <typename S>
Tensor<S> p_step(const Tensor<S>& x_t, Index t, const Tensor<S>& eps_hat,
                 const NoiseSchedule<S>& sched, Rng& rng) {
  check_same_shape(x_t, eps_hat, "p_step");
  check_finite(x_t, "p_step(x_t)");
  check_finite(eps_hat, "p_step(eps_hat)");
  sched.check_step(t);
  const S beta = sched.beta_at(t);
  const S inv_sqrt_alpha = S(1) / std::sqrt(sched.alpha_at(t));
  const S eps_coef = beta / std::sqrt(S(1) - sched.alpha_bar_at(t));
  const S sigma = std::sqrt(beta);
  Tensor<S> out = Tensor<S>::empty(x_t.shape());
  out.flat() = inv_sqrt_alpha * (x_t.flat() - eps_coef * eps_hat.flat());
  if (t > 1) {
    Tensor<S> z = gaussian_sample<S>(rng, x_t.shape());
    out.flat() += sigma * z.flat();
  }
  return out;
}

// Full ancestral sampler: start at pure noise, walk t = T..1, clamp once at
// the end. `model(x_t, t)` returns a Var; evaluated under no-grad.
template <typename S, typename Model>
Tensor<S> sample(Model&& model, const NoiseSchedule<S>& sched, Shape shape, Rng& rng) {
  NoGradGuard ng;
  Tensor<S> x = gaussian_sample<S>(rng, std::move(shape));
  for (Index t = sched.T; t >= 1; --t) {
    Tensor<S> eps_hat = model(x, std::vector<Index>{t}).value();
    x = p_step(x, t, eps_hat, sched, rng);
  }
  return clamp_tensor(x, S(-1), S(1));
}

}  // namespace ssmvdm
