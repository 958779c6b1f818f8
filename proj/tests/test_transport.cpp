#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <vector>

#include "cssccnn/transport.hpp"
#include "oracles.hpp"

using namespace cssccnn;

namespace {

EmpiricalMeasure random_measure(std::mt19937_64& rng, std::size_t d, double scale = 1.0) {
  std::uniform_real_distribution<double> u(0.0, scale);
  std::vector<double> v(d);
  for (double& x : v) x = u(rng);
  return EmpiricalMeasure(std::move(v));
}

SinkhornOptions tight(double beta) {
  SinkhornOptions o;
  o.beta = beta;
  o.max_iter = 100000;
  o.tol = 1e-12;
  return o;
}

}  // namespace

TEST(CostMatrix, Examples) {
  const auto z = cost_matrix(EmpiricalMeasure({0.0}), EmpiricalMeasure({0.0}));
  EXPECT_EQ(z.rows(), 1);
  EXPECT_EQ(z(0, 0), 0.0);

  const auto m = cost_matrix(EmpiricalMeasure({0.0, 2.0}), EmpiricalMeasure({1.0, 1.0}));
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 1.0);
  EXPECT_EQ(m(1, 0), 1.0);
  EXPECT_EQ(m(1, 1), 1.0);

  const EmpiricalMeasure a({0.5, 3.0, 7.0});
  const auto s = cost_matrix(a, a);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(s(i, i), 0.0);
  EXPECT_TRUE(s.isApprox(s.transpose()));
}

TEST(Sinkhorn, SelfTransportIsNearlyFree) {
  const EmpiricalMeasure a({1.0, 2.0, 3.0});
  SinkhornOptions o;
  o.beta = 50.0;
  const auto r = sinkhorn(a, a, o);
  EXPECT_LT(r.loss, 1e-3);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, o.max_iter);
}

TEST(Sinkhorn, TwoPointExample) {
  const EmpiricalMeasure a({0.0, 2.0}), b({1.0, 1.0});
  SinkhornOptions o;
  o.beta = 50.0;
  const auto r = sinkhorn(a, b, o);
  EXPECT_NEAR(r.loss, 1.0, 1e-2);
  EXPECT_DOUBLE_EQ(emd_1d_exact(a, b), 1.0);
}

TEST(Sinkhorn, RejectsBadArguments) {
  EXPECT_THROW(sinkhorn(EmpiricalMeasure({1.0}), EmpiricalMeasure({1.0, 2.0})), InvalidArgument);
  SinkhornOptions o;
  o.beta = 0.0;
  EXPECT_THROW(sinkhorn(EmpiricalMeasure({1.0}), EmpiricalMeasure({2.0}), o), InvalidArgument);
  EXPECT_THROW(EmpiricalMeasure(std::vector<double>{}), InvalidArgument);
  EXPECT_THROW(EmpiricalMeasure({-1.0}), InvalidArgument);
}

TEST(Sinkhorn, MarginalsAndUpperBoundOnRandomPairs) {
  // Weakly coupled blocks in the plan can stall the marginal error for a long time, so
  // convergence is required for most pairs, not all; the bound must hold for every pair.
  std::mt19937_64 rng(42);
  int converged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 4 + trial % 29;
    const auto a = random_measure(rng, d), b = random_measure(rng, d);
    SinkhornOptions o;
    o.beta = 10.0 + trial;
    o.max_iter = 5000;
    const auto r = sinkhorn(a, b, o);
    converged += r.converged;
    if (r.converged) EXPECT_LT(r.marginal_error, o.tol);
    EXPECT_LT(r.marginal_error, 1e-4);
    EXPECT_LE(r.iterations, o.max_iter);
    EXPECT_GE(r.plan.matrix.minCoeff(), 0.0);
    EXPECT_GE(r.loss, emd_1d_exact(a, b)) << trial;
  }
  EXPECT_GE(converged, 95);
}

TEST(Sinkhorn, GapShrinksAsBetaDoubles) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_measure(rng, 16), b = random_measure(rng, 16);
    const double emd = emd_1d_exact(a, b);
    double prev = 1e300;
    for (double beta = 1.0; beta <= 256.0; beta *= 2.0) {
      const double gap = sinkhorn(a, b, tight(beta)).loss - emd;
      EXPECT_GE(gap, -1e-9);
      EXPECT_LE(gap, prev + 1e-6) << "beta=" << beta;
      prev = gap;
    }
  }
}

TEST(Sinkhorn, LogAndDirectDomainsAgree) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_measure(rng, 12), b = random_measure(rng, 12);
    auto o = tight(20.0);
    o.domain = SinkhornDomain::Direct;
    const auto direct = sinkhorn(a, b, o);
    o.domain = SinkhornDomain::Log;
    const auto logd = sinkhorn(a, b, o);
    EXPECT_FALSE(direct.log_domain);
    EXPECT_TRUE(logd.log_domain);
    EXPECT_NEAR(direct.loss, logd.loss, 1e-6);
    EXPECT_LT((direct.plan.matrix - logd.plan.matrix).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Sinkhorn, AutoSwitchesToLogDomainWhenKernelUnderflows) {
  const EmpiricalMeasure a({0.0, 10.0, 40.0}), b({5.0, 20.0, 30.0});
  SinkhornOptions o;
  o.beta = 50.0;  // beta * max cost = 80000
  o.max_iter = 20000;
  o.tol = 1e-10;
  const auto r = sinkhorn(a, b, o);
  EXPECT_TRUE(r.log_domain);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.loss, emd_1d_exact(a, b), 1e-6);
  o.domain = SinkhornDomain::Direct;
  EXPECT_THROW(sinkhorn(a, b, o), InvalidArgument);
}

TEST(SinkhornGrad, ZeroAtIdenticalMeasures) {
  const EmpiricalMeasure a({1.0, 2.0, 3.0});
  SinkhornOptions o;
  o.beta = 50.0;
  const auto r = sinkhorn(a, a, o);
  for (double g : sinkhorn_grad(r, a, a)) EXPECT_LT(std::abs(g), 1e-4);
}

TEST(SinkhornGrad, MatchesCentralDifferencesOfObjective) {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_measure(rng, 8), b = random_measure(rng, 8);
    const auto o = tight(5.0 + trial);
    const auto g = sinkhorn_grad(sinkhorn(a, b, o), a, b);
    const double h = 1e-6;
    Eigen::VectorXd fd(8), ga(8);
    for (std::size_t j = 0; j < 8; ++j) {
      std::vector<double> up(b.values().begin(), b.values().end()), dn = up;
      up[j] += h;
      dn[j] -= h;
      fd[j] = (sinkhorn(a, EmpiricalMeasure(up), o).objective -
               sinkhorn(a, EmpiricalMeasure(dn), o).objective) / (2 * h);
      ga[j] = g[j];
    }
    worst = std::max(worst, (fd - ga).norm() / std::max(fd.norm(), ga.norm()));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(SinkhornGrad, ShiftedPredictionsPushDown) {
  std::mt19937_64 rng(5);
  const auto a = random_measure(rng, 10);
  std::vector<double> shifted(a.values().begin(), a.values().end());
  for (double& x : shifted) x += 0.2;
  const EmpiricalMeasure b(shifted);
  const auto o = tight(200.0);
  const auto g = sinkhorn_grad(sinkhorn(a, b, o), a, b);
  for (std::size_t j = 0; j < g.size(); ++j) {
    EXPECT_GT(g[j], 0.0);
    // Sign agrees with a numeric perturbation of the objective.
    std::vector<double> up = shifted;
    up[j] += 1e-6;
    EXPECT_GT(sinkhorn(a, EmpiricalMeasure(up), o).objective, sinkhorn(a, b, o).objective);
  }
}

TEST(Emd1d, ExactOnSmallCases) {
  const EmpiricalMeasure a({3.0, 1.0, 2.0});
  EXPECT_EQ(emd_1d_exact(a, a), 0.0);
  EXPECT_THROW(emd_1d_exact(a, EmpiricalMeasure({1.0})), InvalidArgument);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_measure(rng, 6, 10.0), y = random_measure(rng, 6, 10.0);
    const std::vector<double> xv(x.values().begin(), x.values().end());
    const std::vector<double> yv(y.values().begin(), y.values().end());
    EXPECT_NEAR(emd_1d_exact(x, y), oracle::brute_force_assignment(xv, yv), 1e-12);
  }
}

TEST(SplitSinkhorn, SingleGroupFallsBackToPlain) {
  std::mt19937_64 rng(1);
  const auto a = random_measure(rng, 10), b = random_measure(rng, 10);
  const std::vector<std::uint8_t> ones(10, 1);
  std::ostringstream warn;
  const auto split = split_sinkhorn(a, b, ones, ones, {}, &warn);
  EXPECT_TRUE(split.fell_back);
  EXPECT_NEAR(split.loss, sinkhorn(a, b).loss, 1e-12);
  EXPECT_NE(warn.str().find("falling back"), std::string::npos);
}

TEST(SplitSinkhorn, MismatchedGroupSizesFallBack) {
  std::mt19937_64 rng(2);
  const auto a = random_measure(rng, 6), b = random_measure(rng, 6);
  const std::vector<std::uint8_t> ga{0, 0, 1, 1, 1, 1}, gb{0, 1, 1, 1, 1, 1};
  std::ostringstream warn;
  const auto split = split_sinkhorn(a, b, ga, gb, {}, &warn);
  EXPECT_TRUE(split.fell_back);
  EXPECT_FALSE(warn.str().empty());
}

TEST(SplitSinkhorn, CorrectSplitOnBimodalDataDoesNotCostMore) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> lo(0.0, 0.1), hi(0.6, 1.0);
  std::vector<double> av, bv;
  std::vector<std::uint8_t> ga, gb;
  for (int i = 0; i < 30; ++i) {
    const bool dense = i % 3 != 0;
    av.push_back(dense ? hi(rng) : lo(rng));
    ga.push_back(dense);
    bv.push_back(dense ? hi(rng) : lo(rng));
    gb.push_back(dense);
  }
  const EmpiricalMeasure a(av), b(bv);
  const auto o = tight(10.0);
  const auto plain = sinkhorn(a, b, o);
  const auto split = split_sinkhorn(a, b, ga, gb, o);
  ASSERT_FALSE(split.fell_back);
  // Re-weight the per-group means into one assignment cost over all 30 samples.
  double weighted = 0.0;
  for (int grp = 0; grp < 2; ++grp) {
    std::vector<double> x, y;
    for (int i = 0; i < 30; ++i) {
      if (ga[i] == grp) x.push_back(av[i]);
      if (gb[i] == grp) y.push_back(bv[i]);
    }
    weighted += sinkhorn(EmpiricalMeasure(x), EmpiricalMeasure(y), o).loss * x.size() / 30.0;
  }
  EXPECT_LE(weighted, plain.loss + 1e-6);
  EXPECT_GE(weighted, emd_1d_exact(a, b) - 1e-9);
  EXPECT_EQ(split.grad.size(), 30u);
}
