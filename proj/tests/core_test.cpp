#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssmvdm/core/gradcheck.hpp"
#include "ssmvdm/core/memory.hpp"
#include "ssmvdm/core/ops.hpp"
#include "ssmvdm/core/optim.hpp"
#include "ssmvdm/core/rng.hpp"

using namespace ssmvdm;

TEST_CASE("tensor shape rules") {
  auto t = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.matrix(2, 3)(1, 2) == 6.0f);
  CHECK_THROWS_AS(Tensor<float>::empty({}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::empty({2, 0}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  auto r = t.reshaped({3, 2});
  CHECK(r.data() == t.data());
  CHECK(Tensor<float>::scalar(2.5f).item() == 2.5f);
  CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("finite check flags NaN and Inf") {
  auto t = Tensor<double>::zeros({4});
  CHECK(t.all_finite());
  t[2] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(check_finite(t, "test"), NonFiniteError);
}

TEST_CASE("memory trace counts live tensor bytes") {
  auto outside = Tensor<float>::zeros({1024});  // allocated before the scope
  std::size_t peak;
  {
    ScopedMemoryTrace trace;
    auto a = Tensor<float>::zeros({1000});
    {
      auto b = Tensor<float>::zeros({500});
      CHECK(MemoryTracker::instance().live_bytes() == 1500 * sizeof(float));
    }
    CHECK(MemoryTracker::instance().live_bytes() == 1000 * sizeof(float));
    outside = Tensor<float>();  // freeing pre-scope memory must not underflow
    peak = trace.peak_bytes();
  }
  CHECK(peak == 1500 * sizeof(float));
}

TEST_CASE("memory trace enforces byte budget") {
  ScopedMemoryTrace trace(1000);
  auto a = Tensor<float>::zeros({100});  // 400 bytes
  CHECK_THROWS_AS(Tensor<float>::zeros({200}), CapacityError);
  // the failed allocation must not linger in the live count
  CHECK(MemoryTracker::instance().live_bytes() == 400);
}

TEST_CASE("nested trace scopes are rejected") {
  ScopedMemoryTrace outer;
  CHECK_THROWS_AS(ScopedMemoryTrace inner, Error);
}

TEST_CASE("rng determinism and stream independence") {
  Rng r1(7);
  auto a = gaussian_sample<float>(r1, {4});
  auto b = gaussian_sample<float>(r1, {4});
  bool same = true;
  for (Index i = 0; i < 4; ++i) same = same && a[i] == b[i];
  CHECK_FALSE(same);

  Rng r2(7);
  auto c = gaussian_sample<float>(r2, {4});
  for (Index i = 0; i < 4; ++i) CHECK(a[i] == c[i]);

  Rng f1 = Rng(7).fork("weights");
  Rng f2 = Rng(7).fork("bias");
  CHECK(f1.seed() != f2.seed());
  CHECK(Rng(7).fork("weights").seed() == f1.seed());
}

TEST_CASE("gaussian moments at n=10000") {
  Rng rng(123);
  auto x = gaussian_sample<double>(rng, {10000});
  double mean = x.flat().mean();
  double var = (x.flat() - mean).square().mean();
  CHECK(mean > -0.05);
  CHECK(mean < 0.05);
  CHECK(var > 0.9);
  CHECK(var < 1.1);
}

TEST_CASE("gaussian stream identical across scalar widths") {
  Rng ra(42), rb(42);
  auto f = gaussian_sample<float>(ra, {64});
  auto d = gaussian_sample<double>(rb, {64});
  for (Index i = 0; i < 64; ++i) CHECK(f[i] == static_cast<float>(d[i]));
}

TEST_CASE("empty shape rejected for sampling") {
  Rng rng(1);
  CHECK_THROWS_AS(gaussian_sample<float>(rng, {}), ShapeError);
}

TEST_CASE("grad of w^2 at w=3 is 6") {
  auto w = make_param(Tensor<double>::scalar(3.0));
  auto loss = sum_all(square(w));
  backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("grad of sum(silu(w)) at 0 is 0.5") {
  auto w = make_param(Tensor<double>::zeros({1}));
  backward(sum_all(silu(w)));
  CHECK(w.grad()[0] == doctest::Approx(0.5));
}

TEST_CASE("sign is not differentiable") {
  auto w = make_param(Tensor<double>::scalar(2.0));
  auto loss = sum_all(sign(w));
  CHECK_THROWS_AS(backward(loss), UnsupportedOpError);
}

TEST_CASE("no-grad mode builds no graph") {
  auto w = make_param(Tensor<double>::scalar(3.0));
  NoGradGuard ng;
  auto y = square(w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad accumulates across shared uses") {
  auto w = make_param(Tensor<double>::scalar(2.0));
  // f = w*w + 3w -> f' = 2w + 3 = 7
  auto loss = add(mul(w, w), scale(w, 3.0));
  backward(sum_all(loss));
  CHECK(w.grad()[0] == doctest::Approx(7.0));
}

static double check_unary(Var<double> (*op)(const Var<double>&), std::uint64_t seed,
                          double lo = -2.0, double hi = 2.0) {
  Rng rng(seed);
  auto w = make_param(uniform_sample<double>(rng, {3, 5}, lo, hi));
  std::vector<Var<double>> params{w};
  return max_grad_rel_err(params, [&] { return mean_all(op(w)); });
}

TEST_CASE("elementwise primitive gradients match finite differences") {
  CHECK(check_unary(&silu<double>, 11) < 1e-6);
  CHECK(check_unary(&sigmoid<double>, 12) < 1e-6);
  CHECK(check_unary(&softplus<double>, 13) < 1e-6);
  CHECK(check_unary(&exp_op<double>, 14, -1.0, 1.0) < 1e-6);
  CHECK(check_unary(&square<double>, 15) < 1e-6);
  CHECK(check_unary(&neg<double>, 16) < 1e-6);
}

TEST_CASE("linear and matmul gradients match finite differences") {
  Rng rng(21);
  auto x = make_param(gaussian_sample<double>(rng, {4, 3}));
  auto w = make_param(gaussian_sample<double>(rng, {5, 3}));
  auto b = make_param(gaussian_sample<double>(rng, {5}));
  std::vector<Var<double>> params{x, w, b};
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(linear(x, w, b))); }) < 1e-6);

  auto a2 = make_param(gaussian_sample<double>(rng, {3, 4}));
  auto b2 = make_param(gaussian_sample<double>(rng, {4, 2}));
  std::vector<Var<double>> p2{a2, b2};
  CHECK(max_grad_rel_err(p2, [&] { return mean_all(square(matmul(a2, b2))); }) < 1e-6);
}

TEST_CASE("bmm gradients with and without transpose") {
  Rng rng(22);
  auto a = make_param(gaussian_sample<double>(rng, {2, 3, 4}));
  auto b = make_param(gaussian_sample<double>(rng, {2, 4, 5}));
  std::vector<Var<double>> params{a, b};
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(bmm(a, b))); }) < 1e-6);

  auto bt = make_param(gaussian_sample<double>(rng, {2, 5, 4}));
  std::vector<Var<double>> pt{a, bt};
  CHECK(max_grad_rel_err(pt, [&] { return mean_all(square(bmm(a, bt, true))); }) < 1e-6);
}

TEST_CASE("norm and softmax gradients match finite differences") {
  Rng rng(23);
  auto x = make_param(gaussian_sample<double>(rng, {4, 6}));
  auto g = make_param(uniform_sample<double>(rng, {6}, 0.5, 1.5));
  auto b = make_param(gaussian_sample<double>(rng, {6}));
  std::vector<Var<double>> params{x, g, b};
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(layer_norm(x, g, b))); }) < 1e-5);

  auto xs = make_param(gaussian_sample<double>(rng, {3, 7}));
  std::vector<Var<double>> ps{xs};
  CHECK(max_grad_rel_err(ps, [&] { return mean_all(square(softmax_lastdim(xs))); }) < 1e-6);

  auto xg = make_param(gaussian_sample<double>(rng, {2, 8, 3, 3}));
  auto gg = make_param(uniform_sample<double>(rng, {8}, 0.5, 1.5));
  auto bg = make_param(gaussian_sample<double>(rng, {8}));
  std::vector<Var<double>> pg{xg, gg, bg};
  CHECK(max_grad_rel_err(pg, [&] {
          return mean_all(square(group_norm(xg, gg, bg, 4)));
        }) < 1e-5);
}

TEST_CASE("conv gradients match finite differences") {
  Rng rng(24);
  auto x = make_param(gaussian_sample<double>(rng, {2, 3, 5, 5}));
  auto w = make_param(gaussian_sample<double>(rng, {4, 3, 3, 3}));
  auto b = make_param(gaussian_sample<double>(rng, {4}));
  std::vector<Var<double>> params{x, w, b};
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(conv2d(x, w, b, 1, 1))); }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(conv2d(x, w, b, 2, 1))); }) < 1e-6);

  auto xs = make_param(gaussian_sample<double>(rng, {2, 6, 4}));
  auto ws = make_param(gaussian_sample<double>(rng, {4, 3}));
  auto bs = make_param(gaussian_sample<double>(rng, {4}));
  std::vector<Var<double>> pd{xs, ws, bs};
  CHECK(max_grad_rel_err(pd, [&] { return mean_all(square(dwconv1d_causal(xs, ws, bs))); }) < 1e-6);
}

TEST_CASE("shape op gradients match finite differences") {
  Rng rng(25);
  auto x = make_param(gaussian_sample<double>(rng, {2, 3, 4}));
  std::vector<Var<double>> params{x};
  CHECK(max_grad_rel_err(params, [&] {
          return mean_all(square(permute(x, {2, 0, 1})));
        }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(flip(x, 1))); }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(slice(x, 2, 1, 2))); }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] {
          return mean_all(square(concat<double>({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1)));
        }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] {
          return mean_all(square(upsample_nearest2x(reshape(x, {1, 2, 3, 4}))));
        }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] {
          return mean_all(square(repeat_rows(reshape(x, {6, 4}), 3)));
        }) < 1e-6);
}

TEST_CASE("broadcast op gradients match finite differences") {
  Rng rng(26);
  auto x = make_param(gaussian_sample<double>(rng, {4, 5}));
  auto c = make_param(gaussian_sample<double>(rng, {5}));
  auto r = make_param(gaussian_sample<double>(rng, {4}));
  std::vector<Var<double>> params{x, c, r};
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(add_bias_rows(x, c))); }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(mul_rows(x, c))); }) < 1e-6);
  CHECK(max_grad_rel_err(params, [&] { return mean_all(square(add_scalar_per_row(x, r))); }) < 1e-6);
}

TEST_CASE("permute matches manual transpose") {
  auto t = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = permute_tensor(t, {1, 0});
  CHECK(p.shape() == Shape{3, 2});
  CHECK(p.matrix(3, 2)(0, 1) == 4.0);
  CHECK(p.matrix(3, 2)(2, 0) == 3.0);
}

TEST_CASE("adam with zero grad leaves params unchanged") {
  std::vector<Tensor<double>> params{Tensor<double>::from_data({3}, {1.0, -2.0, 0.5})};
  std::vector<Tensor<double>> grads{Tensor<double>::zeros({3})};
  auto st = OptimizerState<double>::init(params, 0.001);
  adam_step(params, grads, st);
  CHECK(params[0][0] == 1.0);
  CHECK(params[0][1] == -2.0);
  CHECK(st.step == 1);
}

TEST_CASE("adam first step with unit grad moves by about -lr") {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
  std::vector<Tensor<double>> grads{Tensor<double>::scalar(1.0)};
  auto st = OptimizerState<double>::init(params, 0.001);
  adam_step(params, grads, st);
  // bias correction makes m_hat = v_hat = 1, so the update is lr/(1+eps)
  CHECK(params[0][0] == doctest::Approx(-0.001).epsilon(1e-4));
}

TEST_CASE("adam default learning rate is 1e-5") {
  OptimizerState<float> st;
  CHECK(st.lr == doctest::Approx(1e-5f));
  CHECK(st.beta1 == doctest::Approx(0.9f));
  CHECK(st.beta2 == doctest::Approx(0.999f));
}

TEST_CASE("adam rejects non-finite grads") {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
  std::vector<Tensor<double>> grads{Tensor<double>::scalar(std::nan(""))};
  auto st = OptimizerState<double>::init(params);
  CHECK_THROWS_AS(adam_step(params, grads, st), NonFiniteError);
}

TEST_CASE("ema single step from zero shadow") {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(1.0)};
  auto ema = EmaState<double>::init(params, 0.9999);
  ema.shadow[0].flat().setZero();
  ema_update(ema, params);
  CHECK(ema.shadow[0][0] == doctest::Approx(0.0001));
}

TEST_CASE("ema decay zero tracks params exactly") {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.25)};
  auto ema = EmaState<double>::init(params, 0.0);
  params[0][0] = 0.75;
  ema_update(ema, params);
  CHECK(ema.shadow[0][0] == 0.75);
}

TEST_CASE("ema ten steps follows geometric series") {
  const double d = 0.9, p = 2.0;
  std::vector<Tensor<double>> params{Tensor<double>::scalar(p)};
  auto ema = EmaState<double>::init(params, d);
  ema.shadow[0].flat().setZero();
  for (int i = 0; i < 10; ++i) ema_update(ema, params);
  CHECK(ema.shadow[0][0] == doctest::Approx(p * (1.0 - std::pow(d, 10))));
}

TEST_CASE("ema rejects decay outside range") {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(1.0)};
  CHECK_THROWS_AS(EmaState<double>::init(params, 1.0), ConfigError);
  CHECK_THROWS_AS(EmaState<double>::init(params, -0.1), ConfigError);
}
