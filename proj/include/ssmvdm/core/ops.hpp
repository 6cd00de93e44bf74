#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "ssmvdm/core/autodiff.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat() + b.value().flat();
  return make_op<S>("add", std::move(y), {a.node(), b.node()}, [](Node<S>& n) {
    for (int i = 0; i < 2; ++i)
      if (n.parents[i]->requires_grad) grad_buf(*n.parents[i]).flat() += n.grad.flat();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat() - b.value().flat();
  return make_op<S>("sub", std::move(y), {a.node(), b.node()}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat();
    if (n.parents[1]->requires_grad) grad_buf(*n.parents[1]).flat() -= n.grad.flat();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat() * b.value().flat();
  Tensor<S> av = a.value(), bv = b.value();
  return make_op<S>("mul", std::move(y), {a.node(), b.node()}, [av, bv](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat() * bv.flat();
    if (n.parents[1]->requires_grad) grad_buf(*n.parents[1]).flat() += n.grad.flat() * av.flat();
  });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = -a.value().flat();
  return make_op<S>("neg", std::move(y), {a.node()}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() -= n.grad.flat();
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat() * c;
  return make_op<S>("scale", std::move(y), {a.node()}, [c](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat() * c;
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat() + c;
  return make_op<S>("add_scalar", std::move(y), {a.node()}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat();
  });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat().square();
  Tensor<S> av = a.value();
  return make_op<S>("square", std::move(y), {a.node()}, [av](Node<S>& n) {
    if (n.parents[0]->requires_grad)
      grad_buf(*n.parents[0]).flat() += n.grad.flat() * av.flat() * S(2);
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = S(1) / (S(1) + (-a.value().flat()).exp());
  Tensor<S> yv = y;
  return make_op<S>("sigmoid", std::move(y), {a.node()}, [yv](Node<S>& n) {
    if (n.parents[0]->requires_grad)
      grad_buf(*n.parents[0]).flat() += n.grad.flat() * yv.flat() * (S(1) - yv.flat());
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  auto x = a.value().flat();
  y.flat() = x / (S(1) + (-x).exp());
  Tensor<S> av = a.value();
  return make_op<S>("silu", std::move(y), {a.node()}, [av](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto x = av.flat();
    auto s = (S(1) / (S(1) + (-x).exp())).eval();
    grad_buf(*n.parents[0]).flat() += n.grad.flat() * s * (S(1) + x * (S(1) - s));
  });
}

// Numerically stable softplus: log(1 + e^x) = max(x,0) + log1p(e^{-|x|}).
template <typename S>
Var<S> softplus(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  auto x = a.value().flat();
  y.flat() = x.max(S(0)) + (S(1) + (-x.abs()).exp()).log() ;
  Tensor<S> av = a.value();
  return make_op<S>("softplus", std::move(y), {a.node()}, [av](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    grad_buf(*n.parents[0]).flat() +=
        n.grad.flat() * (S(1) / (S(1) + (-av.flat()).exp()));
  });
}

template <typename S>
Var<S> exp_op(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat().exp();
  Tensor<S> yv = y;
  return make_op<S>("exp", std::move(y), {a.node()}, [yv](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat() * yv.flat();
  });
}

// sign() is registered but has no derivative; requesting grad through it is a
// caller error surfaced at backward time.
template <typename S>
Var<S> sign(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::empty(a.shape());
  y.flat() = a.value().flat().sign();
  return make_op<S>("sign", std::move(y), {a.node()}, [](Node<S>&) {
    throw UnsupportedOpError("sign has no registered derivative");
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Tensor<S> y = Tensor<S>::scalar(a.value().flat().sum());
  return make_op<S>("sum_all", std::move(y), {a.node()}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad[0];
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  Tensor<S> y = Tensor<S>::scalar(a.value().flat().sum() * inv);
  return make_op<S>("mean_all", std::move(y), {a.node()}, [inv](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad[0] * inv;
  });
}

template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// shape ops

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> y = a.value().reshaped(shape);  // shares storage
  Shape orig = a.shape();
  return make_op<S>("reshape", std::move(y), {a.node()}, [orig](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat();
  });
}

namespace detail {

inline std::vector<Index> row_strides(const Shape& s) {
  std::vector<Index> st(s.size());
  Index acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// out[i0,...,ik] = in[i_perm[0],...]; copies in output order, memcpy per
// contiguous tail when the last axis is unmoved.
template <typename S>
void permute_copy(const Tensor<S>& in, Tensor<S>& out, const std::vector<int>& perm) {
  const Shape& is = in.shape();
  const auto istr = row_strides(is);
  const Shape& os = out.shape();
  const std::size_t r = is.size();
  std::vector<Index> ostr_in(r);  // stride in the input per output axis
  for (std::size_t i = 0; i < r; ++i) ostr_in[i] = istr[static_cast<std::size_t>(perm[i])];
  const bool tail = perm[r - 1] == static_cast<int>(r - 1);
  const Index chunk = tail ? os[r - 1] : 1;
  const std::size_t loops = tail ? r - 1 : r;
  std::vector<Index> idx(loops, 0);
  S* dst = out.data();
  const S* src = in.data();
  Index total = out.numel() / chunk;
  for (Index c = 0; c < total; ++c) {
    Index off = 0;
    for (std::size_t i = 0; i < loops; ++i) off += idx[i] * ostr_in[i];
    if (chunk > 1)
      std::memcpy(dst, src + off, sizeof(S) * static_cast<std::size_t>(chunk));
    else
      *dst = src[off];
    dst += chunk;
    for (std::size_t i = loops; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw ShapeError("permute: rank mismatch");
  Shape os(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[static_cast<std::size_t>(perm[i])];
  Tensor<S> y = Tensor<S>::empty(os);
  detail::permute_copy(a, y, perm);
  return y;
}

template <typename S>
Var<S> permute(const Var<S>& a, std::vector<int> perm) {
  Tensor<S> y = permute_tensor(a.value(), perm);
  return make_op<S>("permute", std::move(y), {a.node()}, [perm](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    Tensor<S> gp = permute_tensor(n.grad, inv);
    grad_buf(*n.parents[0]).flat() += gp.flat();
  });
}

namespace detail {

// Axis decomposition (outer, extent, inner) for strided row-major ops.
inline void axis_split(const Shape& s, Index axis, Index& outer, Index& ext, Index& inner) {
  outer = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  ext = s[static_cast<std::size_t>(axis)];
  inner = 1;
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename S>
Tensor<S> flip_tensor(const Tensor<S>& a, Index axis) {
  Index outer, ext, inner;
  detail::axis_split(a.shape(), axis, outer, ext, inner);
  Tensor<S> y = Tensor<S>::empty(a.shape());
  const S* src = a.data();
  S* dst = y.data();
  for (Index o = 0; o < outer; ++o)
    for (Index e = 0; e < ext; ++e)
      std::memcpy(dst + (o * ext + e) * inner, src + (o * ext + (ext - 1 - e)) * inner,
                  sizeof(S) * static_cast<std::size_t>(inner));
  return y;
}

template <typename S>
Var<S> flip(const Var<S>& a, Index axis) {
  Tensor<S> y = flip_tensor(a.value(), axis);
  return make_op<S>("flip", std::move(y), {a.node()}, [axis](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor<S> gf = flip_tensor(n.grad, axis);
    grad_buf(*n.parents[0]).flat() += gf.flat();
  });
}

template <typename S>
Var<S> slice(const Var<S>& a, Index axis, Index start, Index len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= a.value().rank() || start < 0 || len < 1 ||
      start + len > s[static_cast<std::size_t>(axis)])
    throw ShapeError("slice: range out of bounds");
  Index outer, ext, inner;
  detail::axis_split(s, axis, outer, ext, inner);
  Shape os = s;
  os[static_cast<std::size_t>(axis)] = len;
  Tensor<S> y = Tensor<S>::empty(os);
  for (Index o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * len * inner, a.value().data() + (o * ext + start) * inner,
                sizeof(S) * static_cast<std::size_t>(len * inner));
  return make_op<S>("slice", std::move(y), {a.node()},
                    [axis, start, len, outer, ext, inner](Node<S>& n) {
                      if (!n.parents[0]->requires_grad) return;
                      Tensor<S>& g = grad_buf(*n.parents[0]);
                      for (Index o = 0; o < outer; ++o) {
                        auto dst = typename Tensor<S>::Flat(g.data() + (o * ext + start) * inner, len * inner);
                        auto src = typename Tensor<S>::ConstFlat(n.grad.data() + o * len * inner, len * inner);
                        dst += src;
                      }
                    });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  Shape os = s0;
  Index total_ext = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<Index>(i) != axis && s[i] != s0[i])
        throw ShapeError("concat: extent mismatch off-axis");
    total_ext += s[static_cast<std::size_t>(axis)];
  }
  os[static_cast<std::size_t>(axis)] = total_ext;
  Index outer, ext0, inner;
  detail::axis_split(s0, axis, outer, ext0, inner);
  Tensor<S> y = Tensor<S>::empty(os);
  std::vector<Index> exts;
  std::vector<std::shared_ptr<Node<S>>> nodes;
  Index off = 0;
  for (const auto& p : parts) {
    Index e = p.shape()[static_cast<std::size_t>(axis)];
    for (Index o = 0; o < outer; ++o)
      std::memcpy(y.data() + (o * total_ext + off) * inner, p.value().data() + o * e * inner,
                  sizeof(S) * static_cast<std::size_t>(e * inner));
    off += e;
    exts.push_back(e);
    nodes.push_back(p.node());
  }
  return make_op<S>("concat", std::move(y), std::move(nodes),
                    [exts, outer, total_ext, inner](Node<S>& n) {
                      Index off = 0;
                      for (std::size_t i = 0; i < exts.size(); ++i) {
                        Index e = exts[i];
                        auto& par = *n.parents[i];
                        if (par.requires_grad) {
                          Tensor<S>& g = grad_buf(par);
                          for (Index o = 0; o < outer; ++o) {
                            auto dst = typename Tensor<S>::Flat(g.data() + o * e * inner, e * inner);
                            auto src = typename Tensor<S>::ConstFlat(
                                n.grad.data() + (o * total_ext + off) * inner, e * inner);
                            dst += src;
                          }
                        }
                        off += e;
                      }
                    });
}

// ---------------------------------------------------------------------------
// broadcasts

// x viewed as rows (R, C); bias b of extent C added to every row.
template <typename S>
Var<S> add_bias_rows(const Var<S>& x, const Var<S>& b) {
  const Index C = x.shape().back();
  if (b.numel() != C) throw ShapeError("add_bias_rows: bias extent mismatch");
  Tensor<S> y = Tensor<S>::empty(x.shape());
  const Index R = x.numel() / C;
  y.matrix(R, C) = x.value().matrix(R, C);
  y.matrix(R, C).rowwise() += b.value().matrix(1, C).row(0);
  return make_op<S>("add_bias_rows", std::move(y), {x.node(), b.node()}, [R, C](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat();
    if (n.parents[1]->requires_grad)
      grad_buf(*n.parents[1]).matrix(1, C) += n.grad.matrix(R, C).colwise().sum();
  });
}

// x viewed as rows (R, C); per-row scalar b (extent R) added across each row.
template <typename S>
Var<S> add_scalar_per_row(const Var<S>& x, const Var<S>& b) {
  const Index R = b.numel();
  if (x.numel() % R != 0) throw ShapeError("add_scalar_per_row: row count mismatch");
  const Index C = x.numel() / R;
  Tensor<S> y = Tensor<S>::empty(x.shape());
  y.matrix(R, C) = x.value().matrix(R, C);
  y.matrix(R, C).colwise() += b.value().matrix(R, 1).col(0);
  return make_op<S>("add_scalar_per_row", std::move(y), {x.node(), b.node()}, [R, C](Node<S>& n) {
    if (n.parents[0]->requires_grad) grad_buf(*n.parents[0]).flat() += n.grad.flat();
    if (n.parents[1]->requires_grad)
      grad_buf(*n.parents[1]).matrix(R, 1) += n.grad.matrix(R, C).rowwise().sum();
  });
}

// x viewed as rows (R, C); per-channel scale s (extent C).
template <typename S>
Var<S> mul_rows(const Var<S>& x, const Var<S>& s) {
  const Index C = x.shape().back();
  if (s.numel() != C) throw ShapeError("mul_rows: scale extent mismatch");
  const Index R = x.numel() / C;
  Tensor<S> y = Tensor<S>::empty(x.shape());
  y.matrix(R, C) = x.value().matrix(R, C).array().rowwise() *
                   s.value().matrix(1, C).row(0).array();
  Tensor<S> xv = x.value(), sv = s.value();
  return make_op<S>("mul_rows", std::move(y), {x.node(), s.node()}, [R, C, xv, sv](Node<S>& n) {
    if (n.parents[0]->requires_grad)
      grad_buf(*n.parents[0]).matrix(R, C).array() +=
          n.grad.matrix(R, C).array().rowwise() * sv.matrix(1, C).row(0).array();
    if (n.parents[1]->requires_grad)
      grad_buf(*n.parents[1]).matrix(1, C) +=
          (n.grad.matrix(R, C).array() * xv.matrix(R, C).array()).matrix().colwise().sum();
  });
}

// x (R, C) -> (R*times, C) with each row repeated `times` consecutive times.
template <typename S>
Var<S> repeat_rows(const Var<S>& x, Index times) {
  const Index C = x.shape().back();
  const Index R = x.numel() / C;
  Tensor<S> y = Tensor<S>::empty({R * times, C});
  for (Index r = 0; r < R; ++r)
    for (Index t = 0; t < times; ++t)
      std::memcpy(y.data() + (r * times + t) * C, x.value().data() + r * C,
                  sizeof(S) * static_cast<std::size_t>(C));
  return make_op<S>("repeat_rows", std::move(y), {x.node()}, [R, C, times](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto g = grad_buf(*n.parents[0]).matrix(R, C);
    for (Index r = 0; r < R; ++r)
      for (Index t = 0; t < times; ++t)
        g.row(r) += n.grad.matrix(R * times, C).row(r * times + t);
  });
}

// ---------------------------------------------------------------------------
// linalg

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<S> y = Tensor<S>::empty({M, N});
  y.matrix(M, N).noalias() = a.value().matrix(M, K) * b.value().matrix(K, N);
  Tensor<S> av = a.value(), bv = b.value();
  return make_op<S>("matmul", std::move(y), {a.node(), b.node()}, [M, K, N, av, bv](Node<S>& n) {
    auto g = n.grad.matrix(M, N);
    if (n.parents[0]->requires_grad)
      grad_buf(*n.parents[0]).matrix(M, K).noalias() += g * bv.matrix(K, N).transpose();
    if (n.parents[1]->requires_grad)
      grad_buf(*n.parents[1]).matrix(K, N).noalias() += av.matrix(M, K).transpose() * g;
  });
}

// y = x W^T (+ b); x rows (..., In), W (Out, In), b (Out). The last axis of x
// becomes Out.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b = Var<S>()) {
  const Index In = x.shape().back();
  if (w.value().rank() != 2 || w.shape()[1] != In)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const Index Out = w.shape()[0];
  const Index R = x.numel() / In;
  Shape os = x.shape();
  os.back() = Out;
  Tensor<S> y = Tensor<S>::empty(os);
  y.matrix(R, Out).noalias() = x.value().matrix(R, In) * w.value().matrix(Out, In).transpose();
  if (b.defined()) {
    if (b.numel() != Out) throw ShapeError("linear: bias extent mismatch");
    y.matrix(R, Out).rowwise() += b.value().matrix(1, Out).row(0);
  }
  Tensor<S> xv = x.value(), wv = w.value();
  std::vector<std::shared_ptr<Node<S>>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  return make_op<S>("linear", std::move(y), std::move(parents), [R, In, Out, xv, wv](Node<S>& n) {
    auto g = n.grad.matrix(R, Out);
    if (n.parents[0]->requires_grad)
      grad_buf(*n.parents[0]).matrix(R, In).noalias() += g * wv.matrix(Out, In);
    if (n.parents[1]->requires_grad)
      grad_buf(*n.parents[1]).matrix(Out, In).noalias() += g.transpose() * xv.matrix(R, In);
    if (n.parents.size() > 2 && n.parents[2]->requires_grad)
      grad_buf(*n.parents[2]).matrix(1, Out) += g.colwise().sum();
  });
}

// Batched matmul over leading axis: a (G, M, K), b (G, K, N), or (G, N, K)
// when trans_b, giving y = a b^T per slice.
template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b, bool trans_b = false) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.shape()[0] != b.shape()[0])
    throw ShapeError("bmm: need rank-3 with matching batch");
  const Index G = a.shape()[0], M = a.shape()[1], K = a.shape()[2];
  const Index N = trans_b ? b.shape()[1] : b.shape()[2];
  const Index bK = trans_b ? b.shape()[2] : b.shape()[1];
  if (bK != K) throw ShapeError("bmm: inner extent mismatch");
  Tensor<S> y = Tensor<S>::empty({G, M, N});
  for (Index g = 0; g < G; ++g) {
    typename Tensor<S>::ConstMatrixView A(a.value().data() + g * M * K, M, K);
    typename Tensor<S>::MatrixView Y(y.data() + g * M * N, M, N);
    if (trans_b) {
      typename Tensor<S>::ConstMatrixView B(b.value().data() + g * N * K, N, K);
      Y.noalias() = A * B.transpose();
    } else {
      typename Tensor<S>::ConstMatrixView B(b.value().data() + g * K * N, K, N);
      Y.noalias() = A * B;
    }
  }
  Tensor<S> av = a.value(), bv = b.value();
  return make_op<S>("bmm", std::move(y), {a.node(), b.node()},
                    [G, M, K, N, trans_b, av, bv](Node<S>& n) {
                      for (Index g = 0; g < G; ++g) {
                        typename Tensor<S>::ConstMatrixView Gm(n.grad.data() + g * M * N, M, N);
                        typename Tensor<S>::ConstMatrixView A(av.data() + g * M * K, M, K);
                        if (trans_b) {
                          typename Tensor<S>::ConstMatrixView B(bv.data() + g * N * K, N, K);
                          if (n.parents[0]->requires_grad)
                            typename Tensor<S>::MatrixView(grad_buf(*n.parents[0]).data() + g * M * K, M, K)
                                .noalias() += Gm * B;
                          if (n.parents[1]->requires_grad)
                            typename Tensor<S>::MatrixView(grad_buf(*n.parents[1]).data() + g * N * K, N, K)
                                .noalias() += Gm.transpose() * A;
                        } else {
                          typename Tensor<S>::ConstMatrixView B(bv.data() + g * K * N, K, N);
                          if (n.parents[0]->requires_grad)
                            typename Tensor<S>::MatrixView(grad_buf(*n.parents[0]).data() + g * M * K, M, K)
                                .noalias() += Gm * B.transpose();
                          if (n.parents[1]->requires_grad)
                            typename Tensor<S>::MatrixView(grad_buf(*n.parents[1]).data() + g * K * N, K, N)
                                .noalias() += A.transpose() * Gm;
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// normalization / softmax

// Layer norm over the last axis with affine params gamma, beta (extent C).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  const Index C = x.shape().back();
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: affine extent mismatch");
  const Index R = x.numel() / C;
  Tensor<S> y = Tensor<S>::empty(x.shape());
  Tensor<S> xhat = Tensor<S>::empty(x.shape());
  Tensor<S> rstd = Tensor<S>::empty({R});
  auto X = x.value().matrix(R, C);
  auto Y = y.matrix(R, C);
  auto H = xhat.matrix(R, C);
  auto gv = gamma.value().matrix(1, C).row(0).array();
  auto bv = beta.value().matrix(1, C).row(0).array();
  for (Index r = 0; r < R; ++r) {
    S mu = X.row(r).mean();
    S var = (X.row(r).array() - mu).square().mean();
    S rs = S(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    H.row(r).array() = (X.row(r).array() - mu) * rs;
    Y.row(r).array() = H.row(r).array() * gv + bv;
  }
  Tensor<S> gam = gamma.value();
  return make_op<S>("layer_norm", std::move(y), {x.node(), gamma.node(), beta.node()},
                    [R, C, xhat, rstd, gam](Node<S>& n) {
                      auto G = n.grad.matrix(R, C);
                      auto H = xhat.matrix(R, C);
                      if (n.parents[1]->requires_grad)
                        grad_buf(*n.parents[1]).matrix(1, C) +=
                            (G.array() * H.array()).matrix().colwise().sum();
                      if (n.parents[2]->requires_grad)
                        grad_buf(*n.parents[2]).matrix(1, C) += G.colwise().sum();
                      if (!n.parents[0]->requires_grad) return;
                      auto gx = grad_buf(*n.parents[0]).matrix(R, C);
                      auto gv = gam.matrix(1, C).row(0).array();
                      for (Index r = 0; r < R; ++r) {
                        auto dh = (G.row(r).array() * gv).eval();
                        S m1 = dh.mean();
                        S m2 = (dh * H.row(r).array()).mean();
                        gx.row(r).array() += rstd[r] * (dh - m1 - H.row(r).array() * m2);
                      }
                    });
}

// Group norm for x (B, C, H, W): normalize over each (batch, channel-group)
// slab, then apply per-channel affine.
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Index groups,
                  S eps = S(1e-5)) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("group_norm: expected (B, C, H, W)");
  const Index B = s[0], C = s[1], HW = s[2] * s[3];
  if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm: affine extent mismatch");
  const Index Cg = C / groups, slab = Cg * HW;
  Tensor<S> y = Tensor<S>::empty(s);
  Tensor<S> xhat = Tensor<S>::empty(s);
  Tensor<S> rstd = Tensor<S>::empty({B * groups});
  const S* xd = x.value().data();
  S* yd = y.data();
  S* hd = xhat.data();
  const S* gv = gamma.value().data();
  const S* bv = beta.value().data();
  for (Index bg = 0; bg < B * groups; ++bg) {
    typename Tensor<S>::ConstFlat xs(xd + bg * slab, slab);
    typename Tensor<S>::Flat hs(hd + bg * slab, slab);
    S mu = xs.mean();
    S var = (xs - mu).square().mean();
    S rs = S(1) / std::sqrt(var + eps);
    rstd[bg] = rs;
    hs = (xs - mu) * rs;
    const Index g = bg % groups;
    for (Index c = 0; c < Cg; ++c) {
      typename Tensor<S>::Flat ys(yd + bg * slab + c * HW, HW);
      typename Tensor<S>::ConstFlat hc(hd + bg * slab + c * HW, HW);
      ys = hc * gv[g * Cg + c] + bv[g * Cg + c];
    }
  }
  Tensor<S> gam = gamma.value();
  return make_op<S>("group_norm", std::move(y), {x.node(), gamma.node(), beta.node()},
                    [B, C, HW, groups, Cg, slab, xhat, rstd, gam](Node<S>& n) {
                      const S* gd = n.grad.data();
                      const S* hd = xhat.data();
                      if (n.parents[1]->requires_grad || n.parents[2]->requires_grad) {
                        Tensor<S>* dgam = n.parents[1]->requires_grad ? &grad_buf(*n.parents[1]) : nullptr;
                        Tensor<S>* dbet = n.parents[2]->requires_grad ? &grad_buf(*n.parents[2]) : nullptr;
                        for (Index b = 0; b < B; ++b)
                          for (Index c = 0; c < C; ++c) {
                            typename Tensor<S>::ConstFlat gs(gd + (b * C + c) * HW, HW);
                            typename Tensor<S>::ConstFlat hs(hd + (b * C + c) * HW, HW);
                            if (dgam) (*dgam)[c] += (gs * hs).sum();
                            if (dbet) (*dbet)[c] += gs.sum();
                          }
                      }
                      if (!n.parents[0]->requires_grad) return;
                      Tensor<S>& gx = grad_buf(*n.parents[0]);
                      Tensor<S> dh = Tensor<S>::empty({slab});
                      for (Index bg = 0; bg < B * groups; ++bg) {
                        const Index g = bg % groups;
                        for (Index c = 0; c < Cg; ++c) {
                          typename Tensor<S>::ConstFlat gs(gd + bg * slab + c * HW, HW);
                          typename Tensor<S>::Flat ds(dh.data() + c * HW, HW);
                          ds = gs * gam[g * Cg + c];
                        }
                        typename Tensor<S>::ConstFlat hs(hd + bg * slab, slab);
                        typename Tensor<S>::Flat dhf(dh.data(), slab);
                        S m1 = dhf.mean();
                        S m2 = (dhf * hs).mean();
                        typename Tensor<S>::Flat gxs(gx.data() + bg * slab, slab);
                        gxs += rstd[bg] * (dhf - m1 - hs * m2);
                      }
                    });
}

// Row-wise softmax over the last axis. The output is written out of place, so
// logits and probabilities are distinct live tensors at the call site.
template <typename S>
Var<S> softmax_lastdim(const Var<S>& x) {
  const Index C = x.shape().back();
  const Index R = x.numel() / C;
  Tensor<S> y = Tensor<S>::empty(x.shape());
  auto X = x.value().matrix(R, C);
  auto Y = y.matrix(R, C);
  for (Index r = 0; r < R; ++r) {
    S mx = X.row(r).maxCoeff();
    Y.row(r).array() = (X.row(r).array() - mx).exp();
    Y.row(r) /= Y.row(r).sum();
  }
  Tensor<S> yv = y;
  return make_op<S>("softmax", std::move(y), {x.node()}, [R, C, yv](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto G = n.grad.matrix(R, C);
    auto Y = yv.matrix(R, C);
    auto gx = grad_buf(*n.parents[0]).matrix(R, C);
    for (Index r = 0; r < R; ++r) {
      S dot = G.row(r).dot(Y.row(r));
      gx.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

// im2col for one image: x (Cin, H, W) -> cols (Cin*kh*kw, Ho*Wo).
template <typename S>
void im2col(const S* x, Index Cin, Index H, Index W, Index kh, Index kw, Index stride, Index pad,
            Index Ho, Index Wo, S* cols) {
  for (Index c = 0; c < Cin; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        S* row = cols + ((c * kh + i) * kw + j) * (Ho * Wo);
        for (Index oh = 0; oh < Ho; ++oh) {
          Index ih = oh * stride + i - pad;
          if (ih < 0 || ih >= H) {
            std::fill(row + oh * Wo, row + (oh + 1) * Wo, S(0));
            continue;
          }
          for (Index ow = 0; ow < Wo; ++ow) {
            Index iw = ow * stride + j - pad;
            row[oh * Wo + ow] = (iw < 0 || iw >= W) ? S(0) : x[(c * H + ih) * W + iw];
          }
        }
      }
}

template <typename S>
void col2im_acc(const S* cols, Index Cin, Index H, Index W, Index kh, Index kw, Index stride,
                Index pad, Index Ho, Index Wo, S* x) {
  for (Index c = 0; c < Cin; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        const S* row = cols + ((c * kh + i) * kw + j) * (Ho * Wo);
        for (Index oh = 0; oh < Ho; ++oh) {
          Index ih = oh * stride + i - pad;
          if (ih < 0 || ih >= H) continue;
          for (Index ow = 0; ow < Wo; ++ow) {
            Index iw = ow * stride + j - pad;
            if (iw >= 0 && iw < W) x[(c * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution, x (B, Cin, H, W), w (Cout, Cin, kh, kw), optional bias.
// im2col columns are rebuilt in the backward pass instead of being saved.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b = Var<S>(), Index stride = 1,
              Index pad = 0) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw ShapeError("conv2d: shapes " + shape_str(xs) + " and " + shape_str(ws));
  const Index B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const Index Cout = ws[0], kh = ws[2], kw = ws[3];
  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
  Tensor<S> y = Tensor<S>::empty({B, Cout, Ho, Wo});
  const Index ck = Cin * kh * kw;
  {
    Tensor<S> cols = Tensor<S>::empty({ck, Ho * Wo});
    auto Wm = w.value().matrix(Cout, ck);
    for (Index bi = 0; bi < B; ++bi) {
      detail::im2col(x.value().data() + bi * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                     cols.data());
      typename Tensor<S>::MatrixView Y(y.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
      Y.noalias() = Wm * cols.matrix(ck, Ho * Wo);
      if (b.defined()) Y.colwise() += b.value().matrix(Cout, 1).col(0);
    }
  }
  Tensor<S> xv = x.value(), wv = w.value();
  std::vector<std::shared_ptr<Node<S>>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  return make_op<S>(
      "conv2d", std::move(y), std::move(parents),
      [B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, ck, xv, wv](Node<S>& n) {
        Tensor<S> cols = Tensor<S>::empty({ck, Ho * Wo});
        auto Wm = wv.matrix(Cout, ck);
        const bool need_x = n.parents[0]->requires_grad;
        const bool need_w = n.parents[1]->requires_grad;
        const bool need_b = n.parents.size() > 2 && n.parents[2]->requires_grad;
        for (Index bi = 0; bi < B; ++bi) {
          typename Tensor<S>::ConstMatrixView G(n.grad.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
          if (need_w || need_x)
            detail::im2col(xv.data() + bi * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                           cols.data());
          if (need_w)
            grad_buf(*n.parents[1]).matrix(Cout, ck).noalias() +=
                G * cols.matrix(ck, Ho * Wo).transpose();
          if (need_b) grad_buf(*n.parents[2]).matrix(Cout, 1) += G.rowwise().sum();
          if (need_x) {
            cols.matrix(ck, Ho * Wo).noalias() = Wm.transpose() * G;
            detail::col2im_acc(cols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                               grad_buf(*n.parents[0]).data() + bi * Cin * H * W);
          }
        }
      });
}

// Depthwise causal 1-D conv over the middle axis: x (G, L, D), w (D, K),
// bias (D). Tap K-1 aligns with the current frame; earlier taps look back.
template <typename S>
Var<S> dwconv1d_causal(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("dwconv1d_causal: expected (G, L, D)");
  const Index G = xs[0], L = xs[1], D = xs[2];
  if (w.value().rank() != 2 || w.shape()[0] != D) throw ShapeError("dwconv1d_causal: kernel shape");
  const Index K = w.shape()[1];
  if (b.numel() != D) throw ShapeError("dwconv1d_causal: bias extent");
  Tensor<S> y = Tensor<S>::empty(xs);
  auto Wm = w.value().matrix(D, K);
  for (Index g = 0; g < G; ++g) {
    typename Tensor<S>::ConstMatrixView X(x.value().data() + g * L * D, L, D);
    typename Tensor<S>::MatrixView Y(y.data() + g * L * D, L, D);
    Y.rowwise() = b.value().matrix(1, D).row(0);
    for (Index s = 0; s < K && s < L; ++s)
      Y.bottomRows(L - s).array() +=
          X.topRows(L - s).array().rowwise() * Wm.col(K - 1 - s).transpose().array();
  }
  Tensor<S> xv = x.value(), wv = w.value();
  return make_op<S>("dwconv1d_causal", std::move(y), {x.node(), w.node(), b.node()},
                    [G, L, D, K, xv, wv](Node<S>& n) {
                      auto Wm = wv.matrix(D, K);
                      for (Index g = 0; g < G; ++g) {
                        typename Tensor<S>::ConstMatrixView Gm(n.grad.data() + g * L * D, L, D);
                        typename Tensor<S>::ConstMatrixView X(xv.data() + g * L * D, L, D);
                        if (n.parents[0]->requires_grad) {
                          typename Tensor<S>::MatrixView GX(grad_buf(*n.parents[0]).data() + g * L * D, L, D);
                          for (Index s = 0; s < K && s < L; ++s)
                            GX.topRows(L - s).array() +=
                                Gm.bottomRows(L - s).array().rowwise() *
                                Wm.col(K - 1 - s).transpose().array();
                        }
                        if (n.parents[1]->requires_grad) {
                          auto GW = grad_buf(*n.parents[1]).matrix(D, K);
                          for (Index s = 0; s < K && s < L; ++s)
                            GW.col(K - 1 - s) +=
                                (Gm.bottomRows(L - s).array() * X.topRows(L - s).array())
                                    .colwise()
                                    .sum()
                                    .matrix()
                                    .transpose();
                        }
                        if (n.parents[2]->requires_grad)
                          grad_buf(*n.parents[2]).matrix(1, D) += Gm.colwise().sum();
                      }
                    });
}

// Nearest-neighbor 2x spatial upsample for (B, C, H, W).
template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample_nearest2x: expected (B, C, H, W)");
  const Index BC = s[0] * s[1], H = s[2], W = s[3];
  Tensor<S> y = Tensor<S>::empty({s[0], s[1], 2 * H, 2 * W});
  const S* xd = x.value().data();
  S* yd = y.data();
  for (Index p = 0; p < BC; ++p)
    for (Index h = 0; h < H; ++h) {
      S* r0 = yd + (p * 2 * H + 2 * h) * 2 * W;
      S* r1 = r0 + 2 * W;
      const S* xr = xd + (p * H + h) * W;
      for (Index w = 0; w < W; ++w) {
        r0[2 * w] = r0[2 * w + 1] = xr[w];
      }
      std::memcpy(r1, r0, sizeof(S) * static_cast<std::size_t>(2 * W));
    }
  return make_op<S>("upsample_nearest2x", std::move(y), {x.node()}, [BC, H, W](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    S* gx = grad_buf(*n.parents[0]).data();
    const S* g = n.grad.data();
    for (Index p = 0; p < BC; ++p)
      for (Index h = 0; h < H; ++h) {
        const S* r0 = g + (p * 2 * H + 2 * h) * 2 * W;
        const S* r1 = r0 + 2 * W;
        S* xr = gx + (p * H + h) * W;
        for (Index w = 0; w < W; ++w) xr[w] += r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
      }
  });
}

// ---------------------------------------------------------------------------
// tensor-level helpers (no autodiff)

template <typename S>
Tensor<S> clamp_tensor(const Tensor<S>& x, S lo, S hi) {
  Tensor<S> y = Tensor<S>::empty(x.shape());
  y.flat() = x.flat().max(lo).min(hi);
  return y;
}

}  // namespace ssmvdm
