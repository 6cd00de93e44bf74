#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/attn/heads.hpp"
#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/rng.hpp"

namespace ssmvdm {

// Softmax attention across frames, the quadratic baseline the scan layer is
// measured against. Head width is fixed at 64, so the projection width is
// heads * 64 regardless of the channel count.
template <typename S>
struct TemporalAttentionParams {
  static constexpr Index kHeadDim = 64;

  Index C = 0;
  Index heads = 1;

  Var<S> ln_gamma, ln_beta;  // (C)
  Var<S> wq, wk, wv;         // (inner, C)
  Var<S> wo;                 // (C, inner), zero-initialized

  Index inner() const { return heads * kHeadDim; }

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<S>>>& out) const {
    out.emplace_back(prefix + "ln_gamma", ln_gamma);
    out.emplace_back(prefix + "ln_beta", ln_beta);
    out.emplace_back(prefix + "wq", wq);
    out.emplace_back(prefix + "wk", wk);
    out.emplace_back(prefix + "wv", wv);
    out.emplace_back(prefix + "wo", wo);
  }

  std::vector<Var<S>> parameters() const {
    std::vector<std::pair<std::string, Var<S>>> named;
    named_parameters("", named);
    std::vector<Var<S>> out;
    out.reserve(named.size());
    for (auto& [k, v] : named) out.push_back(v);
    return out;
  }
};

template <typename S>
TemporalAttentionParams<S> make_temporal_attention(const Rng& rng, Index C, Index heads) {
  if (C < 1 || heads < 1) throw ConfigError("temporal attention: extents must be positive");
  TemporalAttentionParams<S> p;
  p.C = C;
  p.heads = heads;
  const Index I = p.inner();
  p.ln_gamma = make_param(Tensor<S>::full({C}, S(1)));
  p.ln_beta = make_param(Tensor<S>::zeros({C}));
  const double k = 1.0 / std::sqrt(static_cast<double>(C));
  Rng rq = rng.fork("wq"), rk = rng.fork("wk"), rv = rng.fork("wv");
  p.wq = make_param(uniform_sample<S>(rq, {I, C}, -k, k));
  p.wk = make_param(uniform_sample<S>(rk, {I, C}, -k, k));
  p.wv = make_param(uniform_sample<S>(rv, {I, C}, -k, k));
  p.wo = make_param(Tensor<S>::zeros({C, I}));  // block starts as identity
  return p;
}

namespace detail {

// Pre-norm of one group, written into a caller-owned (L, C) slab. Mirrors
// layer_norm so the streaming path tracks the graph path.
template <typename S>
void ln_rows(const Tensor<S>& X, Index g, const TemporalAttentionParams<S>& p,
             typename Tensor<S>::MatrixView out, S eps = S(1e-5)) {
  const Index L = X.shape()[1], C = X.shape()[2];
  typename Tensor<S>::ConstMatrixView xm(X.data() + g * L * C, L, C);
  auto gv = p.ln_gamma.value().matrix(1, C).row(0).array();
  auto bv = p.ln_beta.value().matrix(1, C).row(0).array();
  for (Index r = 0; r < L; ++r) {
    S mu = xm.row(r).mean();
    S var = (xm.row(r).array() - mu).square().mean();
    S rs = S(1) / std::sqrt(var + eps);
    out.row(r).array() = (xm.row(r).array() - mu) * rs * gv + bv;
  }
}

// Inference path with per-(group, head) workspaces. Only the score and
// probability tensors grow quadratically with L; everything else is a few
// (L, 64) slabs, so the peak is close to two score tensors. The softmax is
// deliberately out of place to keep logits and probabilities both live.
template <typename S>
Tensor<S> temporal_attention_stream(const TemporalAttentionParams<S>& p, const Tensor<S>& X) {
  const Index G = X.shape()[0], L = X.shape()[1], C = X.shape()[2];
  const Index H = p.heads, d = TemporalAttentionParams<S>::kHeadDim;
  const S scl = S(1) / std::sqrt(static_cast<S>(d));
  auto wq = p.wq.value().matrix(p.inner(), C);
  auto wk = p.wk.value().matrix(p.inner(), C);
  auto wv = p.wv.value().matrix(p.inner(), C);
  auto wo = p.wo.value().matrix(C, p.inner());

  Tensor<S> scores = Tensor<S>::empty({G * H, L, L});
  {
    Tensor<S> ln = Tensor<S>::empty({L, C});
    Tensor<S> q = Tensor<S>::empty({L, d}), k = Tensor<S>::empty({L, d});
    for (Index g = 0; g < G; ++g) {
      ln_rows(X, g, p, ln.matrix(L, C));
      for (Index h = 0; h < H; ++h) {
        q.matrix(L, d).noalias() = ln.matrix(L, C) * wq.middleRows(h * d, d).transpose();
        k.matrix(L, d).noalias() = ln.matrix(L, C) * wk.middleRows(h * d, d).transpose();
        typename Tensor<S>::MatrixView sm(scores.data() + (g * H + h) * L * L, L, L);
        sm.noalias() = q.matrix(L, d) * k.matrix(L, d).transpose();
        sm *= scl;
      }
    }
  }

  Tensor<S> probs = Tensor<S>::empty({G * H, L, L});
  {
    auto sm = scores.matrix(G * H * L, L);
    auto pm = probs.matrix(G * H * L, L);
    for (Index r = 0; r < G * H * L; ++r) {
      S mx = sm.row(r).maxCoeff();
      pm.row(r).array() = (sm.row(r).array() - mx).exp();
      pm.row(r) /= pm.row(r).sum();
    }
  }
  scores = Tensor<S>();  // logits released, probabilities stay

  Tensor<S> y = X.clone();
  {
    Tensor<S> ln = Tensor<S>::empty({L, C});
    Tensor<S> v = Tensor<S>::empty({L, d}), out = Tensor<S>::empty({L, d});
    for (Index g = 0; g < G; ++g) {
      ln_rows(X, g, p, ln.matrix(L, C));
      typename Tensor<S>::MatrixView ym(y.data() + g * L * C, L, C);
      for (Index h = 0; h < H; ++h) {
        v.matrix(L, d).noalias() = ln.matrix(L, C) * wv.middleRows(h * d, d).transpose();
        typename Tensor<S>::ConstMatrixView pm(probs.data() + (g * H + h) * L * L, L, L);
        out.matrix(L, d).noalias() = pm * v.matrix(L, d);
        ym.noalias() += out.matrix(L, d) * wo.middleCols(h * d, d).transpose();
      }
    }
  }
  return y;
}

template <typename S>
void check_temporal_input(const TemporalAttentionParams<S>& p, const Var<S>& X) {
  if (X.value().rank() != 3 || X.shape()[2] != p.C)
    throw ShapeError("temporal attention: expected (G, L, " + std::to_string(p.C) + "), got " +
                     shape_str(X.shape()));
  check_finite(X.value(), "temporal_attention(X)");
}

}  // namespace detail

// X (G, L, C) -> (G, L, C). Under gradient tracking this composes tape ops;
// otherwise it takes the streaming path above.
template <typename S>
Var<S> temporal_attention_forward(const TemporalAttentionParams<S>& p, const Var<S>& X) {
  detail::check_temporal_input(p, X);
  if (!GradMode::enabled()) return make_const(detail::temporal_attention_stream(p, X.value()));
  const S scl = S(1) / std::sqrt(static_cast<S>(TemporalAttentionParams<S>::kHeadDim));
  Var<S> ln = layer_norm(X, p.ln_gamma, p.ln_beta);
  Var<S> q = detail::heads_split(linear(ln, p.wq), p.heads);
  Var<S> k = detail::heads_split(linear(ln, p.wk), p.heads);
  Var<S> v = detail::heads_split(linear(ln, p.wv), p.heads);
  Var<S> probs = softmax_lastdim(scale(bmm(q, k, true), scl));
  Var<S> ctx = detail::heads_merge(bmm(probs, v), p.heads);
  return add(linear(ctx, p.wo), X);
}

}  // namespace ssmvdm
