#pragma once

#include <cmath>
#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// Bias-corrected Adam over a flat parameter list. Defaults follow the
// training recipe wired through the CLI (lr 1e-5, betas 0.9/0.999).
template <typename S>
struct OptimizerState {
  S lr = S(1e-5);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::int64_t step = 0;
  std::vector<Tensor<S>> m;
  std::vector<Tensor<S>> v;

  static OptimizerState init(const std::vector<Tensor<S>>& params, S lr = S(1e-5)) {
    OptimizerState st;
    st.lr = lr;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.push_back(Tensor<S>::zeros(p.shape()));
      st.v.push_back(Tensor<S>::zeros(p.shape()));
    }
    return st;
  }
};

template <typename S>
void adam_step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads,
               OptimizerState<S>& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  st.step += 1;
  const S bc1 = S(1) - std::pow(st.beta1, static_cast<S>(st.step));
  const S bc2 = S(1) - std::pow(st.beta2, static_cast<S>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    check_same_shape(params[i], grads[i], "adam_step");
    check_same_shape(params[i], st.m[i], "adam_step(state)");
    check_finite(grads[i], "adam_step(grad)");
    auto g = grads[i].flat();
    auto m = st.m[i].flat();
    auto v = st.v[i].flat();
    m = st.beta1 * m + (S(1) - st.beta1) * g;
    v = st.beta2 * v + (S(1) - st.beta2) * g.square();
    params[i].flat() -= st.lr * (m / bc1) / ((v / bc2).sqrt() + st.eps);
  }
}

// Exponential moving average of parameters: shadow <- d*shadow + (1-d)*p.
// decay = 0 degenerates to tracking the live parameters exactly.
template <typename S>
struct EmaState {
  S decay = S(0.9999);
  std::vector<Tensor<S>> shadow;

  static EmaState init(const std::vector<Tensor<S>>& params, S decay = S(0.9999)) {
    if (!(decay >= S(0) && decay < S(1)))
      throw ConfigError("ema: decay must lie in [0, 1)");
    EmaState e;
    e.decay = decay;
    e.shadow.reserve(params.size());
    for (const auto& p : params) e.shadow.push_back(p.clone());
    return e;
  }
};

template <typename S>
void ema_update(EmaState<S>& ema, const std::vector<Tensor<S>>& params) {
  if (!(ema.decay >= S(0) && ema.decay < S(1)))
    throw ConfigError("ema_update: decay must lie in [0, 1)");
  if (ema.shadow.size() != params.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    check_same_shape(ema.shadow[i], params[i], "ema_update");
    ema.shadow[i].flat() = ema.decay * ema.shadow[i].flat() + (S(1) - ema.decay) * params[i].flat();
  }
}

}  // namespace ssmvdm
