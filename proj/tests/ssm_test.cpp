#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssmvdm/core/gradcheck.hpp"
#include "ssmvdm/ssm/mamba.hpp"
#include "ssmvdm/ssm/scan.hpp"
#include "ssmvdm/ssm/scan_op.hpp"

using namespace ssmvdm;

namespace {

// Builds an instance whose Euler discretization gives constant A_bar = 0.5,
// B_bar = 1: A = -1, Delta = ln 2, B_sel = 1/ln 2.
template <typename S>
std::pair<SsmCoreParams<S>, SelectiveInputs<S>> half_decay_instance(Index L) {
  SsmCoreParams<S> p;
  p.A = Tensor<S>::full({1, 1}, S(-1));
  p.D_skip = Tensor<S>::zeros({1});
  SelectiveInputs<S> in;
  in.u = Tensor<S>::full({1, L, 1}, S(1));
  in.B_sel = Tensor<S>::full({1, L, 1}, S(1.0 / std::log(2.0)));
  in.C_sel = Tensor<S>::full({1, L, 1}, S(1));
  in.Delta = Tensor<S>::full({1, L, 1}, S(std::log(2.0)));
  return {std::move(p), std::move(in)};
}

template <typename S>
std::pair<SsmCoreParams<S>, SelectiveInputs<S>> random_instance(Rng& rng, Index G, Index L,
                                                                Index D, Index N) {
  SsmCoreParams<S> p;
  p.A = Tensor<S>::empty({D, N});
  for (Index i = 0; i < p.A.numel(); ++i) p.A[i] = static_cast<S>(-rng.uniform_double(0.05, 3.0));
  p.D_skip = gaussian_sample<S>(rng, {D});
  SelectiveInputs<S> in;
  in.u = gaussian_sample<S>(rng, {G, L, D});
  in.B_sel = gaussian_sample<S>(rng, {G, L, N});
  in.C_sel = gaussian_sample<S>(rng, {G, L, N});
  in.Delta = uniform_sample<S>(rng, {G, L, D}, 0.001, 0.6);
  return {std::move(p), std::move(in)};
}

template <typename S>
double rel_gap(const Tensor<S>& got, const Tensor<S>& want) {
  double scale = std::max(1e-30, static_cast<double>(want.flat().abs().maxCoeff()));
  return static_cast<double>((got.flat() - want.flat()).abs().maxCoeff()) / scale;
}

}  // namespace

TEST_CASE("zoh closed forms") {
  auto A = Tensor<double>::full({1, 1}, -1.0);
  auto B = Tensor<double>::full({1, 1, 1}, 1.0);
  auto D = Tensor<double>::full({1, 1, 1}, std::log(2.0));
  auto [ab_e, bb_e] = zoh_discretize(A, B, D, false);
  CHECK(ab_e[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(bb_e[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto [ab_x, bb_x] = zoh_discretize(A, B, D, true);
  CHECK(ab_x[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(bb_x[0] == doctest::Approx(0.5).epsilon(1e-12));  // (0.5-1)/(-1)
}

TEST_CASE("zoh euler product example") {
  auto A = Tensor<double>::full({1, 1}, -2.0);
  auto B = Tensor<double>::full({1, 1, 1}, 3.0);
  auto D = Tensor<double>::full({1, 1, 1}, 0.5);
  auto [ab, bb] = zoh_discretize(A, B, D, false);
  CHECK(ab[0] == doctest::Approx(std::exp(-1.0)));
  CHECK(bb[0] == doctest::Approx(1.5));
}

TEST_CASE("zoh small-step limit") {
  auto A = Tensor<double>::full({1, 1}, -2.0);
  auto B = Tensor<double>::full({1, 1, 1}, 3.0);
  auto D = Tensor<double>::full({1, 1, 1}, 1e-12);
  for (bool exact : {false, true}) {
    auto [ab, bb] = zoh_discretize(A, B, D, exact);
    CHECK(ab[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(bb[0]) < 1e-10);
  }
}

TEST_CASE("zoh validates domains") {
  auto A = Tensor<double>::full({1, 1}, -1.0);
  auto Apos = Tensor<double>::full({1, 1}, 0.5);
  auto B = Tensor<double>::full({1, 1, 1}, 1.0);
  auto D = Tensor<double>::full({1, 1, 1}, 0.1);
  auto Dzero = Tensor<double>::zeros({1, 1, 1});
  CHECK_THROWS_AS(zoh_discretize(Apos, B, D), DataError);
  CHECK_THROWS_AS(zoh_discretize(A, B, Dzero), DataError);
}

TEST_CASE("sequential scan two-step hand recurrence") {
  auto [p, in] = half_decay_instance<double>(2);
  auto y = selective_scan_seq(p, in);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("parallel scan four-step hand recurrence") {
  auto [p, in] = half_decay_instance<double>(4);
  auto y = selective_scan_par(p, in);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(1.75).epsilon(1e-12));
  CHECK(y[3] == doctest::Approx(1.875).epsilon(1e-12));
}

TEST_CASE("zero drive gives zero output") {
  auto [p, in] = half_decay_instance<double>(8);
  in.u.flat().setZero();
  auto y = selective_scan_seq(p, in);
  CHECK(y.flat().abs().maxCoeff() == 0.0);
}

TEST_CASE("single step reduces to the direct form") {
  Rng rng(5);
  auto [p, in] = random_instance<double>(rng, 2, 1, 3, 4);
  auto y = selective_scan_seq(p, in);
  auto [ab, bb] = zoh_discretize(p.A, in.B_sel, in.Delta);
  for (Index g = 0; g < 2; ++g)
    for (Index d = 0; d < 3; ++d) {
      double want = 0;
      for (Index n = 0; n < 4; ++n)
        want += in.C_sel[g * 4 + n] * bb[(g * 3 + d) * 4 + n] * in.u[g * 3 + d];
      want += p.D_skip[d] * in.u[g * 3 + d];
      CHECK(y[g * 3 + d] == doctest::Approx(want).epsilon(1e-12));
    }
  auto yp = selective_scan_par(p, in);
  CHECK(rel_gap(yp, y) < 1e-15);
}

TEST_CASE("parallel scan matches sequential on random instances") {
  Rng rng(41);
  for (int i = 0; i < 120; ++i) {
    const Index G = 1 + static_cast<Index>(rng.uniform_below(3));
    const Index L = 1 + static_cast<Index>(rng.uniform_below(64));
    const Index D = 1 + static_cast<Index>(rng.uniform_below(8));
    const Index N = 1 + static_cast<Index>(rng.uniform_below(16));
    const bool exact = rng.uniform_below(2) == 0;
    auto [pd, ind] = random_instance<double>(rng, G, L, D, N);
    auto ys = selective_scan_seq(pd, ind, exact);
    auto yp = selective_scan_par(pd, ind, exact);
    CHECK(rel_gap(yp, ys) < 1e-12);

    SsmCoreParams<float> pf{pd.A.cast<float>(), pd.D_skip.cast<float>(), Tensor<float>()};
    SelectiveInputs<float> inf{ind.u.cast<float>(), ind.B_sel.cast<float>(),
                               ind.C_sel.cast<float>(), ind.Delta.cast<float>()};
    auto ysf = selective_scan_seq(pf, inf, exact);
    auto ypf = selective_scan_par(pf, inf, exact);
    CHECK(rel_gap(ypf, ysf) < 1e-5);
  }
}

TEST_CASE("scan validates extents and contents") {
  Rng rng(6);
  auto [p, in] = random_instance<double>(rng, 1, 4, 2, 3);
  auto bad = in;
  bad.B_sel = Tensor<double>::zeros({1, 4, 5});
  CHECK_THROWS_AS(selective_scan_seq(p, bad), ShapeError);
  auto neg = in;
  neg.Delta[3] = -0.1;
  CHECK_THROWS_AS(selective_scan_seq(p, neg), DataError);
  auto nan = in;
  nan.u[0] = std::nan("");
  CHECK_THROWS_AS(selective_scan_par(p, nan), NonFiniteError);
}

TEST_CASE("stability: A_bar in (0,1) and a geometric state bound") {
  Rng rng(77);
  auto [p, in] = random_instance<double>(rng, 2, 32, 4, 8);
  auto [ab, bb] = zoh_discretize(p.A, in.B_sel, in.Delta);
  CHECK(ab.flat().minCoeff() > 0.0);
  CHECK(ab.flat().maxCoeff() < 1.0);
  Tensor<double> states = Tensor<double>::empty({2, 32, 4, 8});
  selective_scan_seq(p, in, false, &states);
  // b entries of the recurrence are B_bar * u
  Tensor<double> bu = bb.clone();
  for (Index gl = 0; gl < 2 * 32; ++gl) {
    typename Tensor<double>::MatrixView m(bu.data() + gl * 32, 4, 8);
    typename Tensor<double>::ConstFlat ul(in.u.data() + gl * 4, 4);
    m.array().colwise() *= ul;
  }
  const double bound =
      bu.flat().abs().maxCoeff() / (1.0 - ab.flat().maxCoeff());
  CHECK(states.flat().abs().maxCoeff() <= bound + 1e-9);
}

namespace {

template <typename S>
void randomize_out_proj(MambaBlockParams<S>& p, std::uint64_t seed) {
  Rng rng(seed);
  p.out_proj_w.value() = uniform_sample<S>(rng, p.out_proj_w.shape(), -0.3, 0.3);
}

Tensor<float> run_block(const MambaBlockParams<float>& p, const Tensor<float>& X,
                        ScanDirection dir) {
  NoGradGuard ng;
  return mamba_block_forward(p, make_const(X), dir).value();
}

}  // namespace

TEST_CASE("zero-initialized output projection makes the block an identity") {
  Rng rng(9);
  auto p = make_mamba_block<float>(rng, 8, false);
  auto X = gaussian_sample<float>(rng, {3, 5, 8});
  auto y = run_block(p, X, ScanDirection::forward);
  for (Index i = 0; i < X.numel(); ++i) CHECK(y[i] == X[i]);
}

TEST_CASE("block preserves shape (12,16,32)") {
  Rng rng(10);
  auto p = make_mamba_block<float>(rng, 32, false);
  auto X = gaussian_sample<float>(rng, {12, 16, 32});
  auto y = run_block(p, X, ScanDirection::forward);
  CHECK(y.shape() == Shape{12, 16, 32});
  CHECK_THROWS_AS(run_block(p, gaussian_sample<float>(rng, {2, 4, 16}), ScanDirection::forward),
                  ShapeError);
}

TEST_CASE("forward branch is causal, backward branch anticausal") {
  Rng rng(11);
  auto p = make_mamba_block<float>(rng, 8, true);
  randomize_out_proj(p, 1234);
  const Index L = 9, kperturb = 5;
  auto X = gaussian_sample<float>(rng, {2, L, 8});
  auto base_f = run_block(p, X, ScanDirection::forward);
  auto base_b = run_block(p, X, ScanDirection::backward);

  // single-channel bump: a shift of the whole position would vanish in the
  // pre-norm and only exercise the residual
  auto Xp = X.clone();
  Xp.data()[(0 * L + kperturb) * 8 + 3] += 0.37f;
  auto pert_f = run_block(p, Xp, ScanDirection::forward);
  auto pert_b = run_block(p, Xp, ScanDirection::backward);

  bool changed_later = false, changed_earlier = false;
  for (Index l = 0; l < L; ++l)
    for (Index c = 0; c < 8; ++c) {
      const Index i = l * 8 + c;
      if (l < kperturb) CHECK(pert_f[i] == base_f[i]);  // causal: earlier outputs untouched
      else if (l > kperturb && pert_f[i] != base_f[i]) changed_later = true;
      if (l > kperturb) CHECK(pert_b[i] == base_b[i]);  // anticausal mirror
      else if (l < kperturb && pert_b[i] != base_b[i]) changed_earlier = true;
    }
  CHECK(changed_later);
  CHECK(changed_earlier);
  // the other group is untouched entirely
  for (Index i = L * 8; i < 2 * L * 8; ++i) CHECK(pert_f[i] == base_f[i]);
}

TEST_CASE("bidirectional block sees the future") {
  Rng rng(12);
  auto p = make_mamba_block<float>(rng, 8, true);
  randomize_out_proj(p, 99);
  const Index L = 7;
  auto X = gaussian_sample<float>(rng, {1, L, 8});
  NoGradGuard ng;
  auto base = bidirectional_mamba_forward(p, make_const(X)).value();
  auto Xp = X.clone();
  Xp.data()[(L - 1) * 8 + 2] += 0.5f;
  auto pert = bidirectional_mamba_forward(p, make_const(Xp)).value();
  bool first_changed = false;
  for (Index c = 0; c < 8; ++c) first_changed = first_changed || pert[c] != base[c];
  CHECK(first_changed);
  CHECK(base.shape() == Shape{1, L, 8});
}

TEST_CASE("bidirectional forward requires a backward branch") {
  Rng rng(13);
  auto p = make_mamba_block<float>(rng, 8, false);
  auto X = gaussian_sample<float>(rng, {1, 4, 8});
  CHECK_THROWS_AS(bidirectional_mamba_forward(p, make_const(X)), ConfigError);
}

TEST_CASE("parameter-tied bidirectional block commutes with time reversal") {
  Rng rng(14);
  auto p = make_mamba_block<float>(rng, 8, true);
  randomize_out_proj(p, 7);
  p.bwd = p.fwd;  // tie the branches exactly
  auto X = gaussian_sample<float>(rng, {2, 6, 8});
  NoGradGuard ng;
  auto direct = bidirectional_mamba_forward(p, make_const(X)).value();
  auto flipped =
      flip_tensor(bidirectional_mamba_forward(p, make_const(flip_tensor(X, 1))).value(), 1);
  CHECK(rel_gap(flipped, direct) < 1e-5);
}

TEST_CASE("full block gradients match finite differences on a tiny input") {
  Rng rng(15);
  // 2-frame, 1-channel input; every parameter perturbed
  auto p = make_mamba_block<double>(rng, 1, false);
  randomize_out_proj(p, 31);
  auto X = gaussian_sample<double>(rng, {1, 2, 1});
  auto params = p.parameters();
  auto loss = [&] { return mean_all(square(mamba_block_forward(p, make_const(X), ScanDirection::forward))); };
  CHECK(max_grad_rel_err(params, loss) < 1e-4);
}

TEST_CASE("backward-direction and bidirectional gradients match finite differences") {
  Rng rng(16);
  auto p = make_mamba_block<double>(rng, 2, true);
  randomize_out_proj(p, 32);
  auto X = gaussian_sample<double>(rng, {2, 3, 2});
  auto params = p.parameters();
  auto loss_bwd = [&] {
    return mean_all(square(mamba_block_forward(p, make_const(X), ScanDirection::backward)));
  };
  CHECK(max_grad_rel_err(params, loss_bwd) < 1e-4);
  auto loss_bi = [&] { return mean_all(square(bidirectional_mamba_forward(p, make_const(X)))); };
  CHECK(max_grad_rel_err(params, loss_bi) < 1e-4);
}

TEST_CASE("exact-zoh block gradients match finite differences") {
  Rng rng(17);
  auto p = make_mamba_block<double>(rng, 2, false, 2, 16, true);
  randomize_out_proj(p, 33);
  auto X = gaussian_sample<double>(rng, {1, 3, 2});
  auto params = p.parameters();
  auto loss = [&] { return mean_all(square(mamba_block_forward(p, make_const(X), ScanDirection::forward))); };
  CHECK(max_grad_rel_err(params, loss) < 1e-4);
}

TEST_CASE("scan op gradients flow to the drive input") {
  Rng rng(18);
  auto u = make_param(gaussian_sample<double>(rng, {2, 5, 3}));
  auto B = make_param(gaussian_sample<double>(rng, {2, 5, 4}));
  auto C = make_param(gaussian_sample<double>(rng, {2, 5, 4}));
  auto dlt = make_param(uniform_sample<double>(rng, {2, 5, 3}, 0.05, 0.5));
  auto Alog = make_param(uniform_sample<double>(rng, {3, 4}, -1.0, 0.5));
  auto Dsk = make_param(gaussian_sample<double>(rng, {3}));
  for (bool exact : {false, true}) {
    std::vector<Var<double>> params{u, B, C, dlt, Alog, Dsk};
    auto loss = [&] {
      auto A = neg(exp_op(Alog));
      return mean_all(square(selective_scan(u, B, C, dlt, A, Dsk, exact)));
    };
    CHECK(max_grad_rel_err(params, loss) < 1e-4);
  }
}
