#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/attn/heads.hpp"
#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/rng.hpp"

namespace ssmvdm {

// Attention over pixels inside one frame, in the factorized form that never
// builds a position-by-position score matrix: keys are softmaxed over
// positions, queries over features, and they meet in a 64x64 context per
// head. Cost and memory stay linear in H*W.
template <typename S>
struct SpatialAttentionParams {
  static constexpr Index kHeadDim = 64;

  Index C = 0;
  Index heads = 1;
  Index gn_groups = 8;

  Var<S> gn_gamma, gn_beta;  // (C)
  Var<S> wq, wk, wv;         // (inner, C)
  Var<S> wo;                 // (C, inner), zero-initialized

  Index inner() const { return heads * kHeadDim; }

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<S>>>& out) const {
    out.emplace_back(prefix + "gn_gamma", gn_gamma);
    out.emplace_back(prefix + "gn_beta", gn_beta);
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
SpatialAttentionParams<S> make_spatial_attention(const Rng& rng, Index C, Index heads,
                                                 Index gn_groups = 8) {
  if (C < 1 || heads < 1) throw ConfigError("spatial attention: extents must be positive");
  if (gn_groups < 1 || C % gn_groups != 0)
    throw ConfigError("spatial attention: channels must divide into norm groups");
  SpatialAttentionParams<S> p;
  p.C = C;
  p.heads = heads;
  p.gn_groups = gn_groups;
  const Index I = p.inner();
  p.gn_gamma = make_param(Tensor<S>::full({C}, S(1)));
  p.gn_beta = make_param(Tensor<S>::zeros({C}));
  const double k = 1.0 / std::sqrt(static_cast<double>(C));
  Rng rq = rng.fork("wq"), rk = rng.fork("wk"), rv = rng.fork("wv");
  p.wq = make_param(uniform_sample<S>(rq, {I, C}, -k, k));
  p.wk = make_param(uniform_sample<S>(rk, {I, C}, -k, k));
  p.wv = make_param(uniform_sample<S>(rv, {I, C}, -k, k));
  p.wo = make_param(Tensor<S>::zeros({C, I}));
  return p;
}

// X (B, C, H, W) -> (B, C, H, W).
template <typename S>
Var<S> spatial_attention_forward(const SpatialAttentionParams<S>& p, const Var<S>& X) {
  const Shape s = X.shape();
  if (X.value().rank() != 4 || s[1] != p.C)
    throw ShapeError("spatial attention: expected (B, " + std::to_string(p.C) + ", H, W), got " +
                     shape_str(s));
  check_finite(X.value(), "spatial_attention(X)");
  const Index B = s[0], P = s[2] * s[3];
  Var<S> gn = group_norm(X, p.gn_gamma, p.gn_beta, p.gn_groups);
  Var<S> pos = permute(reshape(gn, {B, p.C, P}), {0, 2, 1});  // (B, P, C)
  Var<S> q = softmax_lastdim(detail::heads_split(linear(pos, p.wq), p.heads));
  Var<S> k = softmax_lastdim(permute(detail::heads_split(linear(pos, p.wk), p.heads), {0, 2, 1}));
  Var<S> v = detail::heads_split(linear(pos, p.wv), p.heads);
  Var<S> ctx = bmm(k, v);                             // (B*heads, 64, 64)
  Var<S> out = detail::heads_merge(bmm(q, ctx), p.heads);
  Var<S> y = reshape(permute(linear(out, p.wo), {0, 2, 1}), s);
  return add(y, X);
}

}  // namespace ssmvdm
