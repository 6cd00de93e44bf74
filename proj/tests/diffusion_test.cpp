#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssmvdm/diffusion/ddpm.hpp"
#include "ssmvdm/diffusion/schedule.hpp"

using namespace ssmvdm;

TEST_CASE("linear schedule tables") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  CHECK(s.beta[0] == doctest::Approx(0.1));
  CHECK(s.beta[1] == doctest::Approx(0.2));
  CHECK(s.beta[2] == doctest::Approx(0.3));
  CHECK(s.beta[3] == doctest::Approx(0.4));
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.72));
  CHECK(s.alpha_bar[2] == doctest::Approx(0.504));
  CHECK(s.alpha_bar[3] == doctest::Approx(0.3024));
}

TEST_CASE("single step schedule") {
  auto s = make_noise_schedule<double>(1, 0.25, 0.9);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.75));
}

TEST_CASE("default schedule is T=256 linear 1e-4 to 0.02") {
  auto s = make_noise_schedule<double>();
  CHECK(s.T == 256);
  CHECK(s.beta.front() == doctest::Approx(1e-4));
  CHECK(s.beta.back() == doctest::Approx(0.02));
}

TEST_CASE("schedule bounds validated") {
  CHECK_THROWS_AS(make_noise_schedule<double>(0, 0.1, 0.2), ConfigError);
  CHECK_THROWS_AS(make_noise_schedule<double>(4, 0.0, 0.2), ConfigError);
  CHECK_THROWS_AS(make_noise_schedule<double>(4, 0.3, 0.2), ConfigError);
  CHECK_THROWS_AS(make_noise_schedule<double>(4, 0.1, 1.0), ConfigError);
}

TEST_CASE("alpha_bar is strictly decreasing and consistent") {
  auto s = make_noise_schedule<double>(64, 1e-4, 0.05);
  for (Index t = 2; t <= s.T; ++t) {
    CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    CHECK(s.alpha_bar_at(t) == doctest::Approx(s.alpha_bar_at(t - 1) * s.alpha_at(t)));
    CHECK(s.beta_at(t) > s.beta_at(t - 1));
  }
}

TEST_CASE("q_sample closed form") {
  // alpha_bar = 0.25 via a one-step schedule with beta = 0.75
  auto s = make_noise_schedule<double>(1, 0.75, 0.75);
  auto x0 = Tensor<double>::full({1, 1}, 1.0);
  auto eps = Tensor<double>::zeros({1, 1});
  auto xt = q_sample(x0, {1}, eps, s);
  CHECK(xt[0] == doctest::Approx(0.5));
}

TEST_CASE("q_sample at t=0 is the identity") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  auto x0 = Tensor<double>::from_data({2, 1}, {0.3, -0.8});
  Rng rng(3);
  auto eps = gaussian_sample<double>(rng, {2, 1});
  auto xt = q_sample(x0, {0, 0}, eps, s);
  CHECK(xt[0] == x0[0]);
  CHECK(xt[1] == x0[1]);
}

TEST_CASE("q_sample scalar oracle") {
  // alpha_bar = 0.49: x_t = 0.7*0.8 + sqrt(0.51)*(-1) = -0.15414...
  auto s = make_noise_schedule<double>(1, 0.51, 0.51);
  auto x0 = Tensor<double>::full({1, 1}, 0.8);
  auto eps = Tensor<double>::full({1, 1}, -1.0);
  auto xt = q_sample(x0, {1}, eps, s);
  CHECK(xt[0] == doctest::Approx(0.56 - std::sqrt(0.51)).epsilon(1e-10));
  CHECK(xt[0] == doctest::Approx(-0.15414).epsilon(1e-4));
}

TEST_CASE("q_sample rejects out-of-range step and NaN") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  auto x0 = Tensor<double>::zeros({1, 2});
  auto eps = Tensor<double>::zeros({1, 2});
  CHECK_THROWS_AS(q_sample(x0, {5}, eps, s), DataError);
  CHECK_THROWS_AS(q_sample(x0, {-1}, eps, s), DataError);
  x0[0] = std::nan("");
  CHECK_THROWS_AS(q_sample(x0, {1}, eps, s), NonFiniteError);
}

TEST_CASE("q_sample marginal moments over many draws") {
  auto s = make_noise_schedule<double>(8, 0.05, 0.3);
  const Index t = 5;
  const double ab = s.alpha_bar_at(t);
  auto x0 = Tensor<double>::full({1, 1}, 0.6);
  Rng rng(99);
  const int n = 20000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    auto eps = gaussian_sample<double>(rng, {1, 1});
    double v = q_sample(x0, {t}, eps, s)[0];
    sum += v;
    sumsq += v * v;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  // 5 sigma of the estimators at this n
  CHECK(std::abs(mean - std::sqrt(ab) * 0.6) < 5.0 * std::sqrt((1.0 - ab) / n));
  CHECK(std::abs(var - (1.0 - ab)) < 5.0 * (1.0 - ab) * std::sqrt(2.0 / n));
}

TEST_CASE("eps_loss zero for an exact oracle and about one for a zero model") {
  auto s = make_noise_schedule<double>(16, 1e-3, 0.2);
  DiffusionBatch<double> batch;
  batch.x0 = Tensor<double>::zeros({2, 1, 1, 32, 32});
  Rng rng(17);
  batch.eps = gaussian_sample<double>(rng, {2, 1, 1, 32, 32});
  batch.t = {7, 12};

  auto oracle = [&](const Tensor<double>&, const std::vector<Index>&) {
    return make_const(batch.eps);
  };
  CHECK(eps_loss(oracle, batch, s).value().item() == 0.0);

  auto zero_model = [&](const Tensor<double>& xt, const std::vector<Index>&) {
    return make_const(Tensor<double>::zeros(xt.shape()));
  };
  double loss = eps_loss(zero_model, batch, s).value().item();
  CHECK(loss == doctest::Approx(1.0).epsilon(0.1));
  CHECK(loss >= 0.0);
}

TEST_CASE("eps_loss rejects model output of the wrong shape") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  DiffusionBatch<double> batch;
  batch.x0 = Tensor<double>::zeros({1, 1, 1, 2, 2});
  batch.eps = Tensor<double>::zeros({1, 1, 1, 2, 2});
  batch.t = {2};
  auto bad = [](const Tensor<double>&, const std::vector<Index>&) {
    return make_const(Tensor<double>::zeros({1, 1, 1, 2, 3}));
  };
  CHECK_THROWS_AS(eps_loss(bad, batch, s), ShapeError);
}

TEST_CASE("p_step scalar oracle at the deterministic final step") {
  // alpha_1 = alpha_bar_1 = 0.81, beta_1 = 0.19, x_t = 1, eps_hat = 1, t = 1:
  // x_0 = (1/0.9) * (1 - 0.19/sqrt(0.19)) = (1 - sqrt(0.19)) / 0.9
  auto s = make_noise_schedule<double>(1, 0.19, 0.19);
  auto xt = Tensor<double>::full({1, 1}, 1.0);
  auto eh = Tensor<double>::full({1, 1}, 1.0);
  Rng rng(0);
  auto prev = p_step(xt, 1, eh, s, rng);
  CHECK(prev[0] == doctest::Approx((1.0 - std::sqrt(0.19)) / 0.9).epsilon(1e-12));
  CHECK(prev[0] == doctest::Approx(0.6267890062732584).epsilon(1e-12));
}

TEST_CASE("p_step with zero eps_hat rescales plus noise, no noise at t=1") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  auto xt = Tensor<double>::full({1, 4}, 1.0);
  auto eh = Tensor<double>::zeros({1, 4});
  Rng r1(5), r2(5);
  auto got = p_step(xt, 3, eh, s, r1);
  auto z = gaussian_sample<double>(r2, {1, 4});
  for (Index i = 0; i < 4; ++i)
    CHECK(got[i] ==
          doctest::Approx(1.0 / std::sqrt(s.alpha_at(3)) + std::sqrt(s.beta_at(3)) * z[i]));

  Rng ra(5), rb(6);
  auto d1 = p_step(xt, 1, eh, s, ra);
  auto d2 = p_step(xt, 1, eh, s, rb);
  for (Index i = 0; i < 4; ++i) CHECK(d1[i] == d2[i]);  // rng unused at t=1
  CHECK(d1[0] == doctest::Approx(1.0 / std::sqrt(s.alpha_at(1))));
}

TEST_CASE("p_step validates the step index") {
  auto s = make_noise_schedule<double>(4, 0.1, 0.4);
  auto xt = Tensor<double>::zeros({1, 1});
  Rng rng(1);
  CHECK_THROWS_AS(p_step(xt, 0, xt, s, rng), DataError);
  CHECK_THROWS_AS(p_step(xt, 5, xt, s, rng), DataError);
}

TEST_CASE("noiseless reverse of forward recovers the posterior-mean value") {
  // with eps_hat equal to the true eps and z = 0 (t = 1), p_step inverts
  // q_sample exactly when alpha_bar == alpha
  auto s = make_noise_schedule<double>(1, 0.36, 0.36);
  auto x0 = Tensor<double>::full({1, 1}, 0.45);
  auto eps = Tensor<double>::full({1, 1}, -0.7);
  auto xt = q_sample(x0, {1}, eps, s);
  Rng rng(2);
  auto rec = p_step(xt, 1, eps, s, rng);
  CHECK(rec[0] == doctest::Approx(0.45).epsilon(1e-12));
}

TEST_CASE("one-step sampling with a zero model reduces to a rescale") {
  auto s = make_noise_schedule<double>(1, 0.19, 0.19);
  auto zero_model = [](const Tensor<double>& x, const std::vector<Index>&) {
    return make_const(Tensor<double>::zeros(x.shape()));
  };
  Rng r1(11), r2(11);
  auto out = sample<double>(zero_model, s, {1, 1, 1, 2, 2}, r1);
  auto x1 = gaussian_sample<double>(r2, {1, 1, 1, 2, 2});
  for (Index i = 0; i < 4; ++i) {
    double want = std::clamp(x1[i] / std::sqrt(0.81), -1.0, 1.0);
    CHECK(out[i] == doctest::Approx(want));
  }
  CHECK(out.flat().abs().maxCoeff() <= 1.0);
}

TEST_CASE("sampling is deterministic under a fixed seed") {
  auto s = make_noise_schedule<double>(8, 0.01, 0.2);
  auto model = [](const Tensor<double>& x, const std::vector<Index>&) {
    Tensor<double> y = Tensor<double>::empty(x.shape());
    y.flat() = 0.1 * x.flat();
    return make_const(y);
  };
  Rng r1(77), r2(77);
  auto a = sample<double>(model, s, {1, 2, 1, 2, 2}, r1);
  auto b = sample<double>(model, s, {1, 2, 1, 2, 2}, r2);
  for (Index i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("terminal step of the default schedule is near pure noise") {
  auto s = make_noise_schedule<double>();
  Rng rng(31);
  // signs-only x0 mimics the two-level synthetic frames (per-element x0^2 = 1)
  auto x0 = Tensor<double>::empty({1, 1, 1, 64, 64});
  for (Index i = 0; i < x0.numel(); ++i) x0[i] = rng.uniform_double() < 0.5 ? -1.0 : 1.0;
  double acc = 0;
  const int reps = 8;
  for (int r = 0; r < reps; ++r) {
    auto eps = gaussian_sample<double>(rng, x0.shape());
    auto xT = q_sample(x0, {s.T}, eps, s);
    acc += xT.flat().square().mean();
  }
  CHECK(acc / reps > 0.95);
  CHECK(acc / reps < 1.05);
}
