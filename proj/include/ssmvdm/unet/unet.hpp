#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/attn/spatial_linear_attention.hpp"
#include "ssmvdm/attn/temporal_attention.hpp"
#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/rng.hpp"
#include "ssmvdm/ssm/mamba.hpp"
#include "ssmvdm/unet/config.hpp"

namespace ssmvdm {

// Residual block with a timestep conditioning vector added per channel.
// conv2 starts at zero so the branch is silent at init.
template <typename S>
struct ResBlockParams {
  Index cin = 0, cout = 0;
  Var<S> gn1_g, gn1_b;
  Var<S> conv1_w, conv1_b;  // (cout, cin, 3, 3)
  Var<S> temb_w, temb_b;    // (cout, temb_dim)
  Var<S> gn2_g, gn2_b;
  Var<S> conv2_w, conv2_b;  // (cout, cout, 3, 3), zero-initialized
  Var<S> skip_w, skip_b;    // 1x1 projection, only when cin != cout

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<S>>>& out) const {
    out.emplace_back(prefix + "gn1_g", gn1_g);
    out.emplace_back(prefix + "gn1_b", gn1_b);
    out.emplace_back(prefix + "conv1_w", conv1_w);
    out.emplace_back(prefix + "conv1_b", conv1_b);
    out.emplace_back(prefix + "temb_w", temb_w);
    out.emplace_back(prefix + "temb_b", temb_b);
    out.emplace_back(prefix + "gn2_g", gn2_g);
    out.emplace_back(prefix + "gn2_b", gn2_b);
    out.emplace_back(prefix + "conv2_w", conv2_w);
    out.emplace_back(prefix + "conv2_b", conv2_b);
    if (skip_w.defined()) {
      out.emplace_back(prefix + "skip_w", skip_w);
      out.emplace_back(prefix + "skip_b", skip_b);
    }
  }
};

namespace detail {

template <typename S>
Var<S> conv_param(const Rng& rng, const char* name, Index cout, Index cin, Index k) {
  Rng r = rng.fork(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  return make_param(uniform_sample<S>(r, {cout, cin, k, k}, -bound, bound));
}

template <typename S>
Var<S> bias_param(const Rng& rng, const char* name, Index cout, Index fan_in) {
  Rng r = rng.fork(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return make_param(uniform_sample<S>(r, {cout}, -bound, bound));
}

}  // namespace detail

template <typename S>
ResBlockParams<S> make_res_block(const Rng& rng, Index cin, Index cout, Index temb_dim) {
  ResBlockParams<S> p;
  p.cin = cin;
  p.cout = cout;
  p.gn1_g = make_param(Tensor<S>::full({cin}, S(1)));
  p.gn1_b = make_param(Tensor<S>::zeros({cin}));
  p.conv1_w = detail::conv_param<S>(rng, "conv1_w", cout, cin, 3);
  p.conv1_b = detail::bias_param<S>(rng, "conv1_b", cout, cin * 9);
  Rng rt = rng.fork("temb_w");
  const double bt = 1.0 / std::sqrt(static_cast<double>(temb_dim));
  p.temb_w = make_param(uniform_sample<S>(rt, {cout, temb_dim}, -bt, bt));
  p.temb_b = detail::bias_param<S>(rng, "temb_b", cout, temb_dim);
  p.gn2_g = make_param(Tensor<S>::full({cout}, S(1)));
  p.gn2_b = make_param(Tensor<S>::zeros({cout}));
  p.conv2_w = make_param(Tensor<S>::zeros({cout, cout, 3, 3}));
  p.conv2_b = make_param(Tensor<S>::zeros({cout}));
  if (cin != cout) {
    p.skip_w = detail::conv_param<S>(rng, "skip_w", cout, cin, 1);
    p.skip_b = detail::bias_param<S>(rng, "skip_b", cout, cin);
  }
  return p;
}

// x (R, cin, H, W), temb (R, temb_dim) -> (R, cout, H, W)
template <typename S>
Var<S> res_block_forward(const ResBlockParams<S>& p, const Var<S>& x, const Var<S>& temb) {
  Var<S> h = conv2d(silu(group_norm(x, p.gn1_g, p.gn1_b, Index(8))), p.conv1_w, p.conv1_b,
                    Index(1), Index(1));
  h = add_scalar_per_row(h, linear(silu(temb), p.temb_w, p.temb_b));
  h = conv2d(silu(group_norm(h, p.gn2_g, p.gn2_b, Index(8))), p.conv2_w, p.conv2_b, Index(1),
             Index(1));
  Var<S> sk = p.skip_w.defined() ? conv2d(x, p.skip_w, p.skip_b) : x;
  return add(h, sk);
}

// One temporal mixing site. `none` keeps the site as a pass-through with no
// parameters, which is the frame-independent ablation.
template <typename S>
struct TemporalLayerParams {
  TemporalKind kind = TemporalKind::none;
  std::optional<MambaBlockParams<S>> mamba;
  std::optional<TemporalAttentionParams<S>> attn;

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<S>>>& out) const {
    if (mamba) mamba->named_parameters(prefix, out);
    if (attn) attn->named_parameters(prefix, out);
  }
};

template <typename S>
TemporalLayerParams<S> make_temporal_layer(const Rng& rng, Index C, TemporalKind kind, Index heads,
                                           bool exact_zoh) {
  TemporalLayerParams<S> p;
  p.kind = kind;
  switch (kind) {
    case TemporalKind::ssm_bidirectional:
      p.mamba = make_mamba_block<S>(rng, C, true, 2, 16, exact_zoh);
      break;
    case TemporalKind::ssm_unidirectional:
      p.mamba = make_mamba_block<S>(rng, C, false, 2, 16, exact_zoh);
      break;
    case TemporalKind::attention:
      p.attn = make_temporal_attention<S>(rng, C, heads);
      break;
    case TemporalKind::none:
      break;
  }
  return p;
}

// x (G, L, C) -> (G, L, C)
template <typename S>
Var<S> temporal_layer_forward(const TemporalLayerParams<S>& p, const Var<S>& x) {
  switch (p.kind) {
    case TemporalKind::ssm_bidirectional: return bidirectional_mamba_forward(*p.mamba, x);
    case TemporalKind::ssm_unidirectional:
      return mamba_block_forward(*p.mamba, x, ScanDirection::forward);
    case TemporalKind::attention: return temporal_attention_forward(*p.attn, x);
    case TemporalKind::none: return x;
  }
  throw ConfigError("unknown temporal kind");
}

// Frame-factorized denoiser: convolutions and pixel attention act inside each
// frame with batch and time folded together; at every resolution a temporal
// layer then mixes across frames with pixels folded into the batch instead.
template <typename S>
struct UNetParams {
  UNetConfig cfg;

  Var<S> stem_w, stem_b;
  Var<S> time_w1, time_b1, time_w2, time_b2;

  struct Stage {
    ResBlockParams<S> res1, res2;
    SpatialAttentionParams<S> sattn;
    TemporalLayerParams<S> temporal;
  };
  std::array<Stage, 4> down;
  std::array<Var<S>, 3> down_w, down_b;  // stride-2 conv after down stages 0..2
  Stage mid;
  std::array<Stage, 4> up;
  std::array<Var<S>, 3> up_w, up_b;      // conv after nearest-2x before up stages 2..0
  Var<S> head_gn_g, head_gn_b;
  Var<S> head_w, head_b;                 // zero-initialized: the net starts at zero

  void named_parameters(std::vector<std::pair<std::string, Var<S>>>& out) const {
    auto stage = [&](const std::string& prefix, const Stage& st) {
      st.res1.named_parameters(prefix + ".res1.", out);
      st.res2.named_parameters(prefix + ".res2.", out);
      st.sattn.named_parameters(prefix + ".sattn.", out);
      st.temporal.named_parameters(prefix + ".temporal.", out);
    };
    out.emplace_back("stem_w", stem_w);
    out.emplace_back("stem_b", stem_b);
    out.emplace_back("time_w1", time_w1);
    out.emplace_back("time_b1", time_b1);
    out.emplace_back("time_w2", time_w2);
    out.emplace_back("time_b2", time_b2);
    for (int i = 0; i < 4; ++i) {
      stage("down" + std::to_string(i), down[static_cast<std::size_t>(i)]);
      if (i < 3) {
        out.emplace_back("down" + std::to_string(i) + ".pool_w", down_w[static_cast<std::size_t>(i)]);
        out.emplace_back("down" + std::to_string(i) + ".pool_b", down_b[static_cast<std::size_t>(i)]);
      }
    }
    stage("mid", mid);
    for (int i = 3; i >= 0; --i) {
      stage("up" + std::to_string(i), up[static_cast<std::size_t>(i)]);
      if (i > 0) {
        out.emplace_back("up" + std::to_string(i) + ".grow_w", up_w[static_cast<std::size_t>(i - 1)]);
        out.emplace_back("up" + std::to_string(i) + ".grow_b", up_b[static_cast<std::size_t>(i - 1)]);
      }
    }
    out.emplace_back("head_gn_g", head_gn_g);
    out.emplace_back("head_gn_b", head_gn_b);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
  }

  std::vector<Var<S>> parameters() const {
    std::vector<std::pair<std::string, Var<S>>> named;
    named_parameters(named);
    std::vector<Var<S>> out;
    out.reserve(named.size());
    for (auto& [k, v] : named) out.push_back(v);
    return out;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const Var<S>& v : parameters()) n += v.numel();
    return n;
  }
};

namespace detail {

template <typename S>
typename UNetParams<S>::Stage make_stage(const Rng& rng, Index cin, Index c,
                                         const UNetConfig& cfg) {
  typename UNetParams<S>::Stage st;
  st.res1 = make_res_block<S>(rng.fork("res1"), cin, c, cfg.temb_dim());
  st.res2 = make_res_block<S>(rng.fork("res2"), c, c, cfg.temb_dim());
  st.sattn = make_spatial_attention<S>(rng.fork("sattn"), c, cfg.heads());
  st.temporal = make_temporal_layer<S>(rng.fork("temporal"), c, cfg.temporal, cfg.heads(),
                                       cfg.exact_zoh);
  return st;
}

}  // namespace detail

// Every module draws its init from a stream forked off the module name, so
// swapping the temporal kind leaves all other parameters bit-identical.
template <typename S>
UNetParams<S> make_unet(const Rng& rng, const UNetConfig& cfg) {
  cfg.validate();
  UNetParams<S> p;
  p.cfg = cfg;
  const Index td = cfg.temb_dim();
  p.stem_w = detail::conv_param<S>(rng.fork("stem"), "w", cfg.base, cfg.in_channels, 3);
  p.stem_b = detail::bias_param<S>(rng.fork("stem"), "b", cfg.base, cfg.in_channels * 9);
  {
    Rng rt = rng.fork("time");
    const double b1 = 1.0 / std::sqrt(static_cast<double>(cfg.base));
    Rng r1 = rt.fork("w1"), r2 = rt.fork("b1"), r3 = rt.fork("w2"), r4 = rt.fork("b2");
    p.time_w1 = make_param(uniform_sample<S>(r1, {td, cfg.base}, -b1, b1));
    p.time_b1 = make_param(uniform_sample<S>(r2, {td}, -b1, b1));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(td));
    p.time_w2 = make_param(uniform_sample<S>(r3, {td, td}, -b2, b2));
    p.time_b2 = make_param(uniform_sample<S>(r4, {td}, -b2, b2));
  }
  Index prev = cfg.base;
  for (int i = 0; i < 4; ++i) {
    const Index c = cfg.channels(i);
    p.down[static_cast<std::size_t>(i)] =
        detail::make_stage<S>(rng.fork("down" + std::to_string(i)), prev, c, cfg);
    if (i < 3) {
      Rng rd = rng.fork("down" + std::to_string(i) + ".pool");
      p.down_w[static_cast<std::size_t>(i)] = detail::conv_param<S>(rd, "w", c, c, 3);
      p.down_b[static_cast<std::size_t>(i)] = detail::bias_param<S>(rd, "b", c, c * 9);
    }
    prev = c;
  }
  p.mid = detail::make_stage<S>(rng.fork("mid"), prev, prev, cfg);
  for (int i = 3; i >= 0; --i) {
    const Index c = cfg.channels(i);
    p.up[static_cast<std::size_t>(i)] =
        detail::make_stage<S>(rng.fork("up" + std::to_string(i)), 2 * c, c, cfg);
    if (i > 0) {
      const Index cnext = cfg.channels(i - 1);
      Rng ru = rng.fork("up" + std::to_string(i) + ".grow");
      p.up_w[static_cast<std::size_t>(i - 1)] = detail::conv_param<S>(ru, "w", cnext, c, 3);
      p.up_b[static_cast<std::size_t>(i - 1)] = detail::bias_param<S>(ru, "b", cnext, c * 9);
    }
  }
  p.head_gn_g = make_param(Tensor<S>::full({cfg.base}, S(1)));
  p.head_gn_b = make_param(Tensor<S>::zeros({cfg.base}));
  p.head_w = make_param(Tensor<S>::zeros({cfg.in_channels, cfg.base, 3, 3}));
  p.head_b = make_param(Tensor<S>::zeros({cfg.in_channels}));
  return p;
}

// Sinusoidal features of the diffusion step, (B, dim), half sines half
// cosines with log-spaced frequencies.
template <typename S>
Tensor<S> sinusoidal_time_embedding(const std::vector<Index>& t, Index B, Index dim) {
  const Index half = dim / 2;
  Tensor<S> out = Tensor<S>::empty({B, dim});
  for (Index b = 0; b < B; ++b) {
    const double tb = static_cast<double>(t[t.size() == 1 ? 0 : static_cast<std::size_t>(b)]);
    for (Index i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                static_cast<double>(half - 1));
      out[b * dim + i] = static_cast<S>(std::sin(tb * f));
      out[b * dim + half + i] = static_cast<S>(std::cos(tb * f));
    }
  }
  return out;
}

namespace detail {

// Swap the folding: (B*L, C, h, w) -> (B*h*w, L, C), run the temporal layer,
// fold back.
template <typename S>
Var<S> apply_temporal(const TemporalLayerParams<S>& tp, const Var<S>& x, Index B, Index L) {
  if (tp.kind == TemporalKind::none) return x;
  const Shape s = x.shape();
  const Index C = s[1], P = s[2] * s[3];
  Var<S> t = reshape(x, {B, L, C, P});
  t = permute(t, {0, 3, 1, 2});
  t = temporal_layer_forward(tp, reshape(t, {B * P, L, C}));
  t = permute(reshape(t, {B, P, L, C}), {0, 2, 3, 1});
  return reshape(t, s);
}

template <typename S>
Var<S> apply_stage(const typename UNetParams<S>::Stage& st, Var<S> x, const Var<S>& temb, Index B,
                   Index L) {
  x = res_block_forward(st.res1, x, temb);
  x = res_block_forward(st.res2, x, temb);
  x = spatial_attention_forward(st.sattn, x);
  return apply_temporal(st.temporal, x, B, L);
}

}  // namespace detail

// x (B, L, Cin, H, W), one diffusion step per sample (or a single shared
// step) -> predicted noise of the same shape.
template <typename S>
Var<S> unet_forward(const UNetParams<S>& p, const Var<S>& video, const std::vector<Index>& t) {
  const UNetConfig& cfg = p.cfg;
  const Shape s = video.shape();
  if (video.value().rank() != 5 || s[2] != cfg.in_channels)
    throw ShapeError("unet: expected (B, L, " + std::to_string(cfg.in_channels) +
                     ", H, W), got " + shape_str(s));
  const Index B = s[0], L = s[1], H = s[3], W = s[4];
  if (H % 8 != 0 || W % 8 != 0) throw ShapeError("unet: H and W must be multiples of 8");
  if (static_cast<Index>(t.size()) != B && t.size() != 1)
    throw ShapeError("unet: need one step per sample or a single shared step");
  check_finite(video.value(), "unet(video)");

  Var<S> temb = linear(make_const(sinusoidal_time_embedding<S>(t, B, cfg.base)), p.time_w1,
                       p.time_b1);
  temb = linear(silu(temb), p.time_w2, p.time_b2);
  temb = repeat_rows(temb, L);  // (B*L, temb_dim), frame-major like the fold below

  Var<S> x = conv2d(reshape(video, {B * L, cfg.in_channels, H, W}), p.stem_w, p.stem_b, Index(1),
                    Index(1));
  std::vector<Var<S>> skips;
  for (int i = 0; i < 4; ++i) {
    x = detail::apply_stage<S>(p.down[static_cast<std::size_t>(i)], x, temb, B, L);
    skips.push_back(x);
    if (i < 3)
      x = conv2d(x, p.down_w[static_cast<std::size_t>(i)], p.down_b[static_cast<std::size_t>(i)],
                 Index(2), Index(1));
  }

  x = res_block_forward(p.mid.res1, x, temb);
  x = spatial_attention_forward(p.mid.sattn, x);
  x = detail::apply_temporal(p.mid.temporal, x, B, L);
  x = res_block_forward(p.mid.res2, x, temb);

  for (int i = 3; i >= 0; --i) {
    x = concat<S>({x, skips[static_cast<std::size_t>(i)]}, 1);
    x = detail::apply_stage<S>(p.up[static_cast<std::size_t>(i)], x, temb, B, L);
    if (i > 0)
      x = conv2d(upsample_nearest2x(x), p.up_w[static_cast<std::size_t>(i - 1)],
                 p.up_b[static_cast<std::size_t>(i - 1)], Index(1), Index(1));
  }

  x = conv2d(silu(group_norm(x, p.head_gn_g, p.head_gn_b, Index(8))), p.head_w, p.head_b,
             Index(1), Index(1));
  return reshape(x, s);
}

// Callable adapter for the diffusion loss and sampler.
template <typename S>
struct UNetModel {
  const UNetParams<S>* params;
  Var<S> operator()(const Tensor<S>& xt, const std::vector<Index>& t) const {
    return unet_forward(*params, make_const(xt), t);
  }
};

}  // namespace ssmvdm
