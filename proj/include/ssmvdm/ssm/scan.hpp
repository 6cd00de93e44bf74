#pragma once

#include <cmath>
#include <utility>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// State-space core: per-channel diagonal A (D, N) with strictly negative
// entries, skip gain D_skip (D), and the learned pre-softplus step bias (D).
template <typename S>
struct SsmCoreParams {
  Tensor<S> A;
  Tensor<S> D_skip;
  Tensor<S> dt_bias;
};

// Input-dependent scan drive: u (G, L, D), B_sel/C_sel (G, L, N), and the
// post-softplus step sizes Delta (G, L, D), all strictly positive.
template <typename S>
struct SelectiveInputs {
  Tensor<S> u;
  Tensor<S> B_sel;
  Tensor<S> C_sel;
  Tensor<S> Delta;
};

namespace detail {

template <typename S>
void validate_selective(const SsmCoreParams<S>& p, const SelectiveInputs<S>& in) {
  if (p.A.rank() != 2) throw ShapeError("selective scan: A must be (D, N)");
  const Index D = p.A.extent(0), N = p.A.extent(1);
  if (in.u.rank() != 3 || in.B_sel.rank() != 3 || in.C_sel.rank() != 3 || in.Delta.rank() != 3)
    throw ShapeError("selective scan: inputs must be rank 3");
  const Index G = in.u.extent(0), L = in.u.extent(1);
  if (in.u.extent(2) != D || in.Delta.extent(0) != G || in.Delta.extent(1) != L ||
      in.Delta.extent(2) != D)
    throw ShapeError("selective scan: u/Delta extents disagree with A");
  if (in.B_sel.extent(0) != G || in.B_sel.extent(1) != L || in.B_sel.extent(2) != N ||
      !in.C_sel.same_shape(in.B_sel))
    throw ShapeError("selective scan: B_sel/C_sel extents disagree");
  if (p.D_skip.numel() != D) throw ShapeError("selective scan: D_skip extent");
  check_finite(in.u, "selective scan(u)");
  check_finite(in.B_sel, "selective scan(B_sel)");
  check_finite(in.C_sel, "selective scan(C_sel)");
  check_finite(in.Delta, "selective scan(Delta)");
  if (!(p.A.flat().maxCoeff() < S(0))) throw DataError("selective scan: A entries must be < 0");
  if (!(in.Delta.flat().minCoeff() > S(0)))
    throw DataError("selective scan: Delta must be strictly positive");
}

}  // namespace detail

// Zero-order-hold discretization: A_bar = exp(Delta*A) per (g, l, d, n).
// B_bar is Delta*B_sel by default; the exact mode uses ((exp(Delta*A)-1)/A).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> zoh_discretize(const Tensor<S>& A, const Tensor<S>& B_sel,
                                               const Tensor<S>& Delta, bool exact_zoh = false) {
  if (A.rank() != 2) throw ShapeError("zoh_discretize: A must be (D, N)");
  const Index D = A.extent(0), N = A.extent(1);
  if (Delta.rank() != 3 || Delta.extent(2) != D || B_sel.rank() != 3 || B_sel.extent(2) != N)
    throw ShapeError("zoh_discretize: Delta (G, L, D) and B_sel (G, L, N) required");
  const Index G = Delta.extent(0), L = Delta.extent(1);
  if (B_sel.extent(0) != G || B_sel.extent(1) != L) throw ShapeError("zoh_discretize: extents");
  if (!(A.flat().maxCoeff() < S(0))) throw DataError("zoh_discretize: A entries must be < 0");
  if (!(Delta.flat().minCoeff() > S(0))) throw DataError("zoh_discretize: Delta must be > 0");

  Tensor<S> A_bar = Tensor<S>::empty({G, L, D, N});
  Tensor<S> B_bar = Tensor<S>::empty({G, L, D, N});
  auto Am = A.matrix(D, N);
  for (Index g = 0; g < G; ++g)
    for (Index l = 0; l < L; ++l) {
      const Index gl = g * L + l;
      typename Tensor<S>::ConstFlat dl(Delta.data() + gl * D, D);
      typename Tensor<S>::ConstFlat bl(B_sel.data() + gl * N, N);
      typename Tensor<S>::MatrixView Ab(A_bar.data() + gl * D * N, D, N);
      typename Tensor<S>::MatrixView Bb(B_bar.data() + gl * D * N, D, N);
      Ab.array() = (Am.array().colwise() * dl).exp();
      if (exact_zoh)
        Bb.array() = ((Ab.array() - S(1)) / Am.array()).rowwise() * bl.transpose();
      else
        Bb.array() = (dl.matrix() * bl.matrix().transpose()).array();
    }
  return {std::move(A_bar), std::move(B_bar)};
}

// In-place work-efficient inclusive scan of the associative state update.
// Position pairs (a_k, b_k) are combined with (a2,b2)*(a1,b1) =
// (a2 a1, a2 b1 + b2), elementwise over the trailing M entries. On return b
// holds the inclusive states s_k; a is clobbered with partial products.
template <typename S>
void scan_par_core(Tensor<S>& a, Tensor<S>& b, Index G, Index L, Index M) {
  using Flat = typename Tensor<S>::Flat;
  for (Index g = 0; g < G; ++g) {
    S* ag = a.data() + g * L * M;
    S* bg = b.data() + g * L * M;
    auto combine_into = [&](Index from, Index to) {
      Flat af(ag + from * M, M), at(ag + to * M, M);
      Flat bf(bg + from * M, M), bt(bg + to * M, M);
      bt = at * bf + bt;  // b before a: the update uses to's original a
      at = at * af;
    };
    // upsweep: each position 2s-1, 4s-1, ... folds the block ending at it
    for (Index s = 1; s < L; s *= 2)
      for (Index i = 2 * s - 1; i < L; i += 2 * s) combine_into(i - s, i);
    // downsweep: push finished prefixes into the remaining interior tails
    Index top = 1;
    while (top * 2 < L) top *= 2;
    for (Index s = top / 2; s >= 1; s /= 2)
      for (Index i = 2 * s - 1; i + s < L; i += 2 * s) combine_into(i, i + s);
  }
}

// Strictly left-to-right scan of the same pairs; b becomes the states.
template <typename S>
void scan_seq_core(Tensor<S>& a, Tensor<S>& b, Index G, Index L, Index M) {
  using Flat = typename Tensor<S>::Flat;
  for (Index g = 0; g < G; ++g) {
    S* ag = a.data() + g * L * M;
    S* bg = b.data() + g * L * M;
    for (Index l = 1; l < L; ++l) {
      Flat al(ag + l * M, M), bp(bg + (l - 1) * M, M), bl(bg + l * M, M);
      bl = al * bp + bl;
    }
  }
}

namespace detail {

// y_{g,l,d} = <C_{g,l}, s_{g,l,d,:}> + D_skip_d * u_{g,l,d}
template <typename S>
Tensor<S> emit_outputs(const Tensor<S>& states, const SelectiveInputs<S>& in,
                       const Tensor<S>& D_skip, Index G, Index L, Index D, Index N) {
  Tensor<S> y = Tensor<S>::empty({G, L, D});
  for (Index g = 0; g < G; ++g)
    for (Index l = 0; l < L; ++l) {
      const Index gl = g * L + l;
      typename Tensor<S>::ConstMatrixView Sm(states.data() + gl * D * N, D, N);
      typename Tensor<S>::ConstFlat cl(in.C_sel.data() + gl * N, N);
      typename Tensor<S>::ConstFlat ul(in.u.data() + gl * D, D);
      typename Tensor<S>::Flat yl(y.data() + gl * D, D);
      yl = (Sm * cl.matrix()).array() + D_skip.flat() * ul;
    }
  return y;
}

}  // namespace detail

// Sequential reference recurrence. Keeps only a (D, N) running state, so it
// doubles as the low-memory oracle for the parallel version.
template <typename S>
Tensor<S> selective_scan_seq(const SsmCoreParams<S>& p, const SelectiveInputs<S>& in,
                             bool exact_zoh = false, Tensor<S>* states_out = nullptr) {
  detail::validate_selective(p, in);
  const Index D = p.A.extent(0), N = p.A.extent(1);
  const Index G = in.u.extent(0), L = in.u.extent(1);
  Tensor<S> y = Tensor<S>::empty({G, L, D});
  Tensor<S> state = Tensor<S>::empty({D, N});
  Tensor<S> abar = Tensor<S>::empty({D, N});
  auto Am = p.A.matrix(D, N);
  for (Index g = 0; g < G; ++g) {
    state.flat().setZero();
    auto St = state.matrix(D, N);
    auto Ab = abar.matrix(D, N);
    for (Index l = 0; l < L; ++l) {
      const Index gl = g * L + l;
      typename Tensor<S>::ConstFlat dl(in.Delta.data() + gl * D, D);
      typename Tensor<S>::ConstFlat bl(in.B_sel.data() + gl * N, N);
      typename Tensor<S>::ConstFlat cl(in.C_sel.data() + gl * N, N);
      typename Tensor<S>::ConstFlat ul(in.u.data() + gl * D, D);
      Ab.array() = (Am.array().colwise() * dl).exp();
      if (exact_zoh)
        St.array() = Ab.array() * St.array() +
                     (((Ab.array() - S(1)) / Am.array()).colwise() * ul).rowwise() * bl.transpose();
      else
        St.array() = Ab.array() * St.array() + ((dl * ul).matrix() * bl.matrix().transpose()).array();
      typename Tensor<S>::Flat yl(y.data() + gl * D, D);
      yl = (St * cl.matrix()).array() + p.D_skip.flat() * ul;
      if (states_out) {
        typename Tensor<S>::Flat so(states_out->data() + gl * D * N, D * N);
        so = typename Tensor<S>::ConstFlat(state.data(), D * N);
      }
    }
  }
  return y;
}

// Parallel-prefix evaluation of the same recurrence. Identical output
// contract to selective_scan_seq, up to floating-point reassociation.
template <typename S>
Tensor<S> selective_scan_par(const SsmCoreParams<S>& p, const SelectiveInputs<S>& in,
                             bool exact_zoh = false) {
  detail::validate_selective(p, in);
  const Index D = p.A.extent(0), N = p.A.extent(1);
  const Index G = in.u.extent(0), L = in.u.extent(1);
  auto [a, b] = zoh_discretize(p.A, in.B_sel, in.Delta, exact_zoh);
  // b_k <- B_bar_k * u_k before scanning
  for (Index gl = 0; gl < G * L; ++gl) {
    typename Tensor<S>::MatrixView Bb(b.data() + gl * D * N, D, N);
    typename Tensor<S>::ConstFlat ul(in.u.data() + gl * D, D);
    Bb.array().colwise() *= ul;
  }
  scan_par_core(a, b, G, L, D * N);
  a = Tensor<S>();  // partial products are dead; release before emitting
  return detail::emit_outputs(b, in, p.D_skip, G, L, D, N);
}

}  // namespace ssmvdm
