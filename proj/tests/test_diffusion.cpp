#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "advdiff/diffusion.hpp"

using namespace advdiff;
using T64 = Tensor<double>;

namespace {

// log N(x; sqrt(ab) mu, ab var + 1 - ab), summed over independent coordinates.
double gaussian_log_density(const std::vector<double>& x, const std::vector<double>& mu, const std::vector<double>& var,
                            double ab) {
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = ab * var[i] + 1.0 - ab;
    const double d = x[i] - std::sqrt(ab) * mu[i];
    lp += -0.5 * d * d / v - 0.5 * std::log(2.0 * M_PI * v);
  }
  return lp;
}

std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST(Schedule, SingleStep) {
  const auto s = make_linear_schedule(1, 0.1, 0.1);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, CumulativeProductMatchesDirectProduct) {
  const auto s = make_linear_schedule(200, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int i = 0; i < 200; ++i) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * i / 199.0L);
  EXPECT_NEAR(s.alpha_bar(200), static_cast<double>(prod), 1e-14);
  EXPECT_NEAR(s.alpha_bar(200), 0.13218275425061793, 1e-12);
}

TEST(Schedule, StrictlyDecreasing) {
  for (int steps : {10, 50, 200, 1000}) {
    const auto s = make_default_schedule(steps);
    for (int t = 1; t <= steps; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
}

TEST(Schedule, DefaultEndpointsScaleWithSteps) {
  EXPECT_DOUBLE_EQ(default_beta_start(1000), 1e-4);
  EXPECT_DOUBLE_EQ(default_beta_end(1000), 0.02);
  EXPECT_DOUBLE_EQ(default_beta_start(100), 1e-3);
  EXPECT_DOUBLE_EQ(default_beta_end(100), 0.2);
  EXPECT_DOUBLE_EQ(default_beta_end(10), 0.5);
}

TEST(Schedule, InvalidParameters) {
  EXPECT_THROW(make_linear_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.03, 0.02), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), ConfigError);
  const auto s = make_linear_schedule(10, 1e-4, 0.02);
  EXPECT_THROW(s.alpha_bar(11), ConfigError);
  EXPECT_THROW(s.beta(0), ConfigError);
}

TEST(ForwardNoise, ZeroNoiseScalesSignal) {
  const auto s = make_default_schedule(50);
  Rng rng(1);
  const auto x0 = T64::uniform({1, 3, 4, 4}, rng, 0, 1);
  const auto xt = forward_noise(x0, 20, T64::zeros(x0.shape()), s);
  for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_DOUBLE_EQ(xt[i], std::sqrt(s.alpha_bar(20)) * x0[i]);
}

TEST(ForwardNoise, ZeroSignalScalesNoise) {
  const auto s = make_default_schedule(50);
  Rng rng(2);
  const auto eps = T64::randn({1, 3, 4, 4}, rng);
  const auto xt = forward_noise(T64::zeros(eps.shape()), 7, eps, s);
  for (std::size_t i = 0; i < eps.numel(); ++i) EXPECT_DOUBLE_EQ(xt[i], std::sqrt(1 - s.alpha_bar(7)) * eps[i]);
}

TEST(ForwardNoise, FinalStepIsNearlyPureNoise) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(3);
  const auto x0 = T64::uniform({1, 3, 8, 8}, rng, 0, 1);
  const auto eps = T64::randn(x0.shape(), rng);
  const auto xt = forward_noise(x0, 1000, eps, s);
  const double ab = s.alpha_bar(1000);
  const double bound = std::sqrt(ab) * max_abs(x0) + std::abs(1 - std::sqrt(1 - ab)) * max_abs(eps);
  EXPECT_LE(max_abs(sub(xt, eps)), bound + 1e-12);
  EXPECT_LT(bound, 0.01);
}

TEST(ForwardNoise, RejectsMismatch) {
  const auto s = make_default_schedule(10);
  EXPECT_THROW(forward_noise(T64::zeros({2}), 1, T64::zeros({3}), s), ShapeError);
  EXPECT_THROW(forward_noise(T64::zeros({2}), 0, T64::zeros({2}), s), ConfigError);
}

TEST(AnalyticEps, VanishesAtMode) {
  const auto s = make_default_schedule(50);
  const GaussianOracle oracle({1, 4}, {0.1, 0.5, 0.9, 0.3}, {0.2, 0.1, 0.05, 0.3});
  std::vector<double> mode;
  for (double m : oracle.mu0()) mode.push_back(std::sqrt(s.alpha_bar(12)) * m);
  const auto eps = analytic_eps(oracle, s, T64({1, 4}, mode), 12);
  EXPECT_LT(max_abs(eps), 1e-15);
}

TEST(AnalyticEps, StandardNormalPrior) {
  const auto s = make_default_schedule(50);
  const auto oracle = GaussianOracle::constant({1, 5}, 0.0, 1.0);
  Rng rng(4);
  const auto x = T64::randn({1, 5}, rng);
  for (int t : {1, 10, 50}) {
    const auto eps = analytic_eps(oracle, s, x, t);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(eps[i], std::sqrt(1 - s.alpha_bar(t)) * x[i], 1e-14);
  }
}

TEST(AnalyticEps, ScalarHandExample) {
  const auto s = make_linear_schedule(1, 0.36, 0.36);
  ASSERT_NEAR(s.alpha_bar(1), 0.64, 1e-15);
  const GaussianOracle oracle({1}, {1.0}, {0.25});
  const T64 x({1}, {1.0});
  EXPECT_NEAR(oracle.score(x, 1, s)[0], -0.2 / 0.52, 1e-12);
  EXPECT_NEAR(oracle.score(x, 1, s)[0], -0.384615, 1e-6);
  EXPECT_NEAR(analytic_eps(oracle, s, x, 1)[0], 0.230769, 1e-6);
  const auto num = numeric_gradient(
      [&](const std::vector<double>& v) { return gaussian_log_density(v, {1.0}, {0.25}, 0.64); }, {1.0}, 1e-5);
  EXPECT_NEAR(oracle.score(x, 1, s)[0], num[0], 1e-8);
}

TEST(AnalyticEps, MatchesNumericalLogDensityGradient) {
  const auto s = make_default_schedule(100);
  Rng rng(5);
  std::vector<double> mu(6), var(6);
  for (std::size_t i = 0; i < 6; ++i) {
    mu[i] = rng.uniform(0, 1);
    var[i] = rng.uniform(0.01, 0.3);
  }
  const GaussianOracle oracle({6}, mu, var);
  for (int trial = 0; trial < 10; ++trial) {
    const int t = 1 + static_cast<int>(rng.below(100));
    const auto x = T64::randn({6}, rng);
    const auto eps = analytic_eps(oracle, s, x, t);
    const double ab = s.alpha_bar(t);
    const auto num = numeric_gradient(
        [&](const std::vector<double>& v) { return gaussian_log_density(v, mu, var, ab); },
        std::vector<double>(x.data().begin(), x.data().end()), 1e-5);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(-eps[i] / std::sqrt(1 - ab), num[i], 1e-5);
  }
}

TEST(MixtureOracle, ScoreMatchesNumericalGradient) {
  const auto s = make_default_schedule(50);
  Rng rng(6);
  std::vector<std::vector<double>> centres(3, std::vector<double>(4));
  for (auto& c : centres)
    for (auto& v : c) v = rng.uniform(0, 1);
  const double var0 = 0.05;
  const GaussianMixtureOracle oracle({4}, centres, var0);
  for (int t : {1, 10, 40}) {
    const double ab = s.alpha_bar(t), vt = ab * var0 + 1 - ab;
    auto logp = [&](const std::vector<double>& x) {
      double acc = 0.0;
      for (const auto& c : centres) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < 4; ++i) d2 += std::pow(x[i] - std::sqrt(ab) * c[i], 2);
        acc += std::exp(-d2 / (2 * vt));
      }
      return std::log(acc);
    };
    const auto x = T64::uniform({4}, rng, 0, 1);
    const auto score = oracle.score(x, t, s);
    const auto num = numeric_gradient(logp, std::vector<double>(x.data().begin(), x.data().end()), 1e-6);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(score[i], num[i], 1e-5);
  }
}

TEST(MixtureOracle, SingleComponentMatchesGaussian) {
  const auto s = make_default_schedule(50);
  const std::vector<double> mu{0.2, 0.7};
  const GaussianMixtureOracle mix({2}, {mu}, 0.1);
  const GaussianOracle g({2}, mu, {0.1, 0.1});
  const T64 x({2}, {0.4, -0.3});
  for (int t : {1, 25, 50})
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(mix.score(x, t, s)[i], g.score(x, t, s)[i], 1e-14);
  EXPECT_THROW(GaussianMixtureOracle({2}, {}, 0.1), ConfigError);
  EXPECT_THROW(GaussianMixtureOracle({2}, {mu}, 0.0), ConfigError);
}

TEST(DdpmStep, ZeroScore) {
  const auto s = make_default_schedule(50);
  const T64 x({3}, {0.3, -1.0, 2.0});
  const auto y = ddpm_step(x, T64::zeros({3}), 9, s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(s.alpha(9)), 1e-15);
}

TEST(DdpmStep, PosteriorMeanIdentity) {
  const auto s = make_default_schedule(50);
  Rng rng(7);
  const auto x = T64::randn({8}, rng);
  const auto eps = T64::randn({8}, rng);
  const int t = 13;
  const auto y = ddpm_step(x, score_from_eps(eps, t, s), t, s);
  for (std::size_t i = 0; i < 8; ++i) {
    const double expect = (x[i] - (1 - s.alpha(t)) / std::sqrt(1 - s.alpha_bar(t)) * eps[i]) / std::sqrt(s.alpha(t));
    EXPECT_NEAR(y[i], expect, 1e-13);
  }
}

TEST(DdimStep, DeterministicInversion) {
  const auto s = make_default_schedule(50);
  Rng rng(8);
  const auto x0 = T64::uniform({1, 3, 4, 4}, rng, 0, 1);
  const auto eps = T64::randn(x0.shape(), rng);
  const int t = 30, t_prev = 22;
  const auto xt = forward_noise(x0, t, eps, s);
  const auto y = ddim_step(xt, eps, t, t_prev, s, 0.0);
  const auto expect = forward_noise(x0, t_prev, eps, s);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
  const auto to_zero = ddim_step(xt, eps, t, 0, s, 0.0);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(to_zero[i], x0[i], 1e-12);
}

TEST(DdimStep, RejectsInvalidSteps) {
  const auto s = make_default_schedule(50);
  const T64 x({2}, {0, 0});
  EXPECT_THROW(ddim_step(x, x, 5, 5, s, 0.0), ConfigError);
  EXPECT_THROW(ddim_step(x, x, 5, 7, s, 0.0), ConfigError);
  EXPECT_THROW(ddim_step(x, x, 5, 4, s, 1.0), ConfigError);
  EXPECT_THROW(ddim_step(x, T64::zeros({3}), 5, 4, s, 0.0), ShapeError);
}

TEST(DdimStep, EtaOneMatchesDdpmPosteriorVariance) {
  const auto s = make_default_schedule(100);
  for (int t : {2, 30, 90}) {
    const double posterior = (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * s.beta(t);
    const double sigma = ddim_sigma(s, t, t - 1, 1.0);
    EXPECT_NEAR(sigma * sigma, posterior, 1e-14);

    Rng rng(static_cast<std::uint64_t>(t));
    const int n = 20000;
    const T64 x = T64::full({n}, 0.4);
    const T64 e = T64::full({n}, -0.2);
    const auto y = ddim_step(x, e, t, t - 1, s, 1.0, &rng);
    const double m = std::accumulate(y.data().begin(), y.data().end(), 0.0) / n;
    double v = 0.0;
    for (double yi : y.data()) v += (yi - m) * (yi - m);
    v /= n - 1;
    EXPECT_NEAR(v / posterior, 1.0, 0.05);
  }
}

TEST(ReverseSample, ExactScoreRecoversPriorMoments) {
  const auto s = make_default_schedule(100);
  const auto oracle = GaussianOracle::constant({1, 4000}, 0.5, 0.25);
  Rng rng(9);
  const auto xT = Tensor<Real>::randn({1, 4000}, rng);
  ReverseOptions opts;
  opts.stochastic = true;
  const auto x0 = reverse_sample(xT, 100, oracle, s, opts, rng);
  double m = 0.0, v = 0.0;
  for (auto xi : x0.data()) m += xi;
  m /= 4000;
  for (auto xi : x0.data()) v += (xi - m) * (xi - m);
  v /= 3999;
  EXPECT_NEAR(m, 0.5, 4 * 0.5 / std::sqrt(4000.0));
  EXPECT_NEAR(v / 0.25, 1.0, 0.1);
}

TEST(Sampler, NamesRoundTrip) {
  EXPECT_EQ(parse_sampler("ddim"), SamplerKind::kDdim);
  EXPECT_EQ(parse_sampler(sampler_name(SamplerKind::kDdpmMean)), SamplerKind::kDdpmMean);
  EXPECT_THROW(parse_sampler("euler"), ConfigError);
}
