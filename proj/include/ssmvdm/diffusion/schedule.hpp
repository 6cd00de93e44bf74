#pragma once

#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// Per-step diffusion tables. Step t runs 1..T; index t-1 stores step t.
// t = 0 is the clean-data convention: alpha_bar(0) == 1.
template <typename S>
struct NoiseSchedule {
  Index T = 0;
  std::vector<S> beta;
  std::vector<S> alpha;
  std::vector<S> alpha_bar;

  S beta_at(Index t) const {
    check_step(t);
    return beta[static_cast<std::size_t>(t - 1)];
  }
  S alpha_at(Index t) const {
    check_step(t);
    return alpha[static_cast<std::size_t>(t - 1)];
  }
  S alpha_bar_at(Index t) const {
    if (t == 0) return S(1);
    check_step(t);
    return alpha_bar[static_cast<std::size_t>(t - 1)];
  }

  void check_step(Index t) const {
    if (t < 1 || t > T)
      throw DataError("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(T));
  }
};

template <typename S>
NoiseSchedule<S> make_noise_schedule(Index T = 256, S beta_start = S(1e-4), S beta_end = S(0.02)) {
  if (T < 1) throw ConfigError("noise schedule: T must be >= 1");
  if (!(beta_start > S(0) && beta_start <= beta_end && beta_end < S(1)))
    throw ConfigError("noise schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule<S> sch;
  sch.T = T;
  sch.beta.resize(static_cast<std::size_t>(T));
  sch.alpha.resize(static_cast<std::size_t>(T));
  sch.alpha_bar.resize(static_cast<std::size_t>(T));
  S acc = S(1);
  for (Index t = 0; t < T; ++t) {
    S b = T == 1 ? beta_start
                 : beta_start + (beta_end - beta_start) * static_cast<S>(t) / static_cast<S>(T - 1);
    sch.beta[static_cast<std::size_t>(t)] = b;
    sch.alpha[static_cast<std::size_t>(t)] = S(1) - b;
    acc *= S(1) - b;
    sch.alpha_bar[static_cast<std::size_t>(t)] = acc;
  }
  return sch;
}

}  // namespace ssmvdm
