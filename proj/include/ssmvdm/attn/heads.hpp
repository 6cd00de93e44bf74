#pragma once

#include "ssmvdm/core/ops.hpp"

namespace ssmvdm {
namespace detail {

// Fold the head axis into the batch axis so batched matmuls see one
// (rows, head_dim) problem per head. heads_merge is the exact inverse.
template <typename S>
Var<S> heads_split(const Var<S>& x, Index H) {
  const Shape s = x.shape();  // (B, L, H*d)
  const Index d = s[2] / H;
  return reshape(permute(reshape(x, {s[0], s[1], H, d}), {0, 2, 1, 3}), {s[0] * H, s[1], d});
}

template <typename S>
Var<S> heads_merge(const Var<S>& x, Index H) {
  const Shape s = x.shape();  // (B*H, L, d)
  const Index B = s[0] / H;
  return reshape(permute(reshape(x, {B, H, s[1], s[2]}), {0, 2, 1, 3}), {B, s[1], H * s[2]});
}

}  // namespace detail
}  // namespace ssmvdm
