#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/rng.hpp"
#include "ssmvdm/ssm/scan_op.hpp"

namespace ssmvdm {

enum class ScanDirection { forward, backward };

// Per-direction machinery: the bidirectional variant duplicates conv and
// selective projections while the gate and outer projections stay shared.
template <typename S>
struct MambaDirectionParams {
  Var<S> conv_w;    // (D_inner, conv_width)
  Var<S> conv_b;    // (D_inner)
  Var<S> x_proj_w;  // (dt_rank + 2N, D_inner)
  Var<S> dt_proj_w; // (D_inner, dt_rank)
  Var<S> dt_bias;   // (D_inner), pre-softplus
  Var<S> A_log;     // (D_inner, N); A = -exp(A_log) keeps A < 0 by construction
  Var<S> D_skip;    // (D_inner)
};

template <typename S>
struct MambaBlockParams {
  Index C = 0;
  Index E = 2;
  Index N = 16;
  Index dt_rank = 1;
  Index conv_width = 4;
  bool exact_zoh = false;

  Var<S> ln_gamma, ln_beta;  // (C)
  Var<S> in_proj_w;          // (2*E*C, C): value rows then gate rows
  Var<S> out_proj_w;         // (C, E*C), zero-initialized
  MambaDirectionParams<S> fwd;
  std::optional<MambaDirectionParams<S>> bwd;

  Index inner() const { return E * C; }
  bool bidirectional() const { return bwd.has_value(); }

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<S>>>& out) const {
    out.emplace_back(prefix + "ln_gamma", ln_gamma);
    out.emplace_back(prefix + "ln_beta", ln_beta);
    out.emplace_back(prefix + "in_proj_w", in_proj_w);
    out.emplace_back(prefix + "out_proj_w", out_proj_w);
    auto dir = [&](const char* d, const MambaDirectionParams<S>& m) {
      out.emplace_back(prefix + d + std::string(".conv_w"), m.conv_w);
      out.emplace_back(prefix + d + std::string(".conv_b"), m.conv_b);
      out.emplace_back(prefix + d + std::string(".x_proj_w"), m.x_proj_w);
      out.emplace_back(prefix + d + std::string(".dt_proj_w"), m.dt_proj_w);
      out.emplace_back(prefix + d + std::string(".dt_bias"), m.dt_bias);
      out.emplace_back(prefix + d + std::string(".A_log"), m.A_log);
      out.emplace_back(prefix + d + std::string(".D_skip"), m.D_skip);
    };
    dir("fwd", fwd);
    if (bwd) dir("bwd", *bwd);
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

namespace detail {

template <typename S>
MambaDirectionParams<S> init_mamba_direction(const Rng& rng, Index D, Index N, Index R, Index K) {
  MambaDirectionParams<S> m;
  const double kconv = 1.0 / std::sqrt(static_cast<double>(K));
  Rng r1 = rng.fork("conv_w"), r2 = rng.fork("conv_b"), r3 = rng.fork("x_proj_w"),
      r4 = rng.fork("dt_proj_w"), r5 = rng.fork("dt_bias");
  m.conv_w = make_param(uniform_sample<S>(r1, {D, K}, -kconv, kconv));
  m.conv_b = make_param(uniform_sample<S>(r2, {D}, -kconv, kconv));
  const double kx = 1.0 / std::sqrt(static_cast<double>(D));
  m.x_proj_w = make_param(uniform_sample<S>(r3, {R + 2 * N, D}, -kx, kx));
  const double kd = 1.0 / std::sqrt(static_cast<double>(R));
  m.dt_proj_w = make_param(uniform_sample<S>(r4, {D, R}, -kd, kd));
  // bias chosen so softplus(bias) is log-uniform in [1e-3, 1e-1]
  Tensor<S> bias = Tensor<S>::empty({D});
  for (Index i = 0; i < D; ++i) {
    double dt = std::exp(r5.uniform_double(std::log(1e-3), std::log(1e-1)));
    bias[i] = static_cast<S>(std::log(std::expm1(dt)));
  }
  m.dt_bias = make_param(std::move(bias));
  Tensor<S> alog = Tensor<S>::empty({D, N});
  for (Index d = 0; d < D; ++d)
    for (Index n = 0; n < N; ++n)
      alog.matrix(D, N)(d, n) = static_cast<S>(std::log(static_cast<double>(n + 1)));
  m.A_log = make_param(std::move(alog));
  m.D_skip = make_param(Tensor<S>::full({D}, S(1)));
  return m;
}

}  // namespace detail

template <typename S>
MambaBlockParams<S> make_mamba_block(const Rng& rng, Index C, bool bidirectional, Index E = 2,
                                     Index N = 16, bool exact_zoh = false) {
  if (C < 1 || E < 1 || N < 1) throw ConfigError("mamba block: extents must be positive");
  MambaBlockParams<S> p;
  p.C = C;
  p.E = E;
  p.N = N;
  p.dt_rank = (C + 15) / 16;
  p.exact_zoh = exact_zoh;
  const Index D = p.inner();
  p.ln_gamma = make_param(Tensor<S>::full({C}, S(1)));
  p.ln_beta = make_param(Tensor<S>::zeros({C}));
  const double kin = 1.0 / std::sqrt(static_cast<double>(C));
  Rng rin = rng.fork("in_proj_w");
  p.in_proj_w = make_param(uniform_sample<S>(rin, {2 * D, C}, -kin, kin));
  p.out_proj_w = make_param(Tensor<S>::zeros({C, D}));  // block starts as identity
  p.fwd = detail::init_mamba_direction<S>(rng.fork("fwd"), D, N, p.dt_rank, p.conv_width);
  if (bidirectional)
    p.bwd = detail::init_mamba_direction<S>(rng.fork("bwd"), D, N, p.dt_rank, p.conv_width);
  return p;
}

namespace detail {

// Value path of one direction: reversed sequences run through their own
// causal conv and scan, then get flipped back before gating.
template <typename S>
Var<S> mamba_branch(const MambaBlockParams<S>& p, const MambaDirectionParams<S>& d,
                    const Var<S>& x, const Var<S>& gate, bool reverse) {
  Var<S> v = reverse ? flip(x, 1) : x;
  v = silu(dwconv1d_causal(v, d.conv_w, d.conv_b));
  Var<S> proj = linear(v, d.x_proj_w);
  Var<S> dt_low = slice(proj, 2, 0, p.dt_rank);
  Var<S> Bsel = slice(proj, 2, p.dt_rank, p.N);
  Var<S> Csel = slice(proj, 2, p.dt_rank + p.N, p.N);
  Var<S> delta = softplus(linear(dt_low, d.dt_proj_w, d.dt_bias));
  Var<S> A = neg(exp_op(d.A_log));
  Var<S> y = selective_scan(v, Bsel, Csel, delta, A, d.D_skip, p.exact_zoh);
  if (reverse) y = flip(y, 1);
  return mul(y, gate);
}

template <typename S>
std::pair<Var<S>, Var<S>> mamba_value_gate(const MambaBlockParams<S>& p, const Var<S>& X) {
  if (X.value().rank() != 3 || X.shape()[2] != p.C)
    throw ShapeError("mamba: expected (G, L, " + std::to_string(p.C) + "), got " +
                     shape_str(X.shape()));
  check_finite(X.value(), "mamba(X)");
  Var<S> ln = layer_norm(X, p.ln_gamma, p.ln_beta);
  Var<S> xz = linear(ln, p.in_proj_w);
  Var<S> x = slice(xz, 2, 0, p.inner());
  Var<S> gate = silu(slice(xz, 2, p.inner(), p.inner()));
  return {x, gate};
}

}  // namespace detail

// Single-direction block: pre-norm, value/gate split, one scan branch,
// shared output projection, residual add.
template <typename S>
Var<S> mamba_block_forward(const MambaBlockParams<S>& p, const Var<S>& X, ScanDirection dir) {
  auto [x, gate] = detail::mamba_value_gate(p, X);
  const bool reverse = dir == ScanDirection::backward;
  const MambaDirectionParams<S>& machinery = (reverse && p.bwd) ? *p.bwd : p.fwd;
  Var<S> y = detail::mamba_branch(p, machinery, x, gate, reverse);
  return add(linear(y, p.out_proj_w), X);
}

// Bidirectional block of the temporal layer: both gated branches summed
// before the shared output projection, then the residual.
template <typename S>
Var<S> bidirectional_mamba_forward(const MambaBlockParams<S>& p, const Var<S>& X) {
  if (!p.bwd) throw ConfigError("bidirectional mamba: block built without a backward branch");
  auto [x, gate] = detail::mamba_value_gate(p, X);
  Var<S> yf = detail::mamba_branch(p, p.fwd, x, gate, false);
  Var<S> yb = detail::mamba_branch(p, *p.bwd, x, gate, true);
  return add(linear(add(yf, yb), p.out_proj_w), X);
}

}  // namespace ssmvdm
