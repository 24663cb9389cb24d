#include "branchrl/tabular.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace branchrl;
using testsupport::mc_branched_returns;
using testsupport::mc_returns;

namespace {

TabularMDP one_state_mdp(double gamma, double reward) {
  TabularMDP mdp;
  mdp.num_states = 1;
  mdp.num_actions = 1;
  mdp.transition = {Matrix::Ones(1, 1)};
  mdp.reward = Matrix::Constant(1, 1, reward);
  mdp.gamma = gamma;
  mdp.rho0 = Vector::Ones(1);
  mdp.r_max = std::max(1.0, std::abs(reward));
  return mdp;
}

TabularPolicy uniform_policy(int s, int a) {
  TabularPolicy pi;
  pi.probs = Matrix::Constant(s, a, 1.0 / a);
  return pi;
}

}  // namespace

TEST(TabularMdp, ValidationCatchesBadInputs) {
  Rng rng(1);
  TabularMDP mdp = sample_random_mdp(4, 2, 0.9, rng);
  EXPECT_NO_THROW(mdp.validate());

  TabularMDP bad = mdp;
  bad.transition[0](0, 0) += 1e-6;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  bad = mdp;
  bad.reward(1, 1) = 2.5;  // beyond r_max = 1
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  bad = mdp;
  bad.rho0(0) += 0.1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ExactReturns, VanishingDiscountGivesOneStepReward) {
  Rng rng(2);
  TabularMDP mdp = sample_random_mdp(5, 3, 1e-9, rng);
  TabularPolicy pi = sample_random_policy(5, 3, rng);
  const double one_step = mdp.rho0.dot(policy_reward(mdp, pi));
  EXPECT_NEAR(exact_returns(mdp, pi), one_step, 1e-8);
}

TEST(ExactReturns, GeometricSeries) {
  TabularMDP mdp = one_state_mdp(0.9, 1.0);
  TabularPolicy pi = uniform_policy(1, 1);
  EXPECT_NEAR(exact_returns(mdp, pi), 10.0, 1e-12);
}

TEST(ExactReturns, MatchesMonteCarloOracle) {
  Rng rng(3);
  TabularMDP mdp = sample_random_mdp(5, 3, 0.9, rng);
  TabularPolicy pi = sample_random_policy(5, 3, rng);
  const double eta = exact_returns(mdp, pi);
  const auto mc = mc_returns(mdp, pi, 100000, 77);
  EXPECT_NEAR(eta, mc.mean, 3.0 * mc.stderr_mean + 1e-5);
}

TEST(ExactReturns, BoundedByRmaxOverOneMinusGamma) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const double gamma = rng.uniform(0.3, 0.99);
    TabularMDP mdp = sample_random_mdp(2 + rng.uniform_int(7), 1 + rng.uniform_int(3), gamma, rng);
    TabularPolicy pi = sample_random_policy(mdp.num_states, mdp.num_actions, rng);
    EXPECT_LE(std::abs(exact_returns(mdp, pi)), mdp.r_max / (1.0 - gamma) + 1e-9);
  }
}

TEST(StateMarginals, HorizonZeroIsInitialDistribution) {
  Rng rng(5);
  TabularMDP mdp = sample_random_mdp(4, 2, 0.9, rng);
  TabularPolicy pi = sample_random_policy(4, 2, rng);
  const auto seq = state_marginals(mdp, pi, 0);
  ASSERT_EQ(seq.marginals.size(), 1u);
  EXPECT_LT((seq.marginals[0] - mdp.rho0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(StateMarginals, DeterministicTwoCycleAlternates) {
  TabularMDP mdp;
  mdp.num_states = 2;
  mdp.num_actions = 1;
  Matrix p(2, 2);
  p << 0, 1, 1, 0;
  mdp.transition = {p};
  mdp.reward = Matrix::Zero(2, 1);
  mdp.gamma = 0.9;
  mdp.rho0 = Vector(2);
  mdp.rho0 << 1, 0;
  TabularPolicy pi = uniform_policy(2, 1);
  const auto seq = state_marginals(mdp, pi, 5);
  for (int t = 0; t <= 5; ++t) {
    EXPECT_NEAR(seq.marginals[static_cast<std::size_t>(t)](t % 2 == 0 ? 0 : 1), 1.0, 1e-15);
  }
}

TEST(StateMarginals, MatchesMatrixPowerOracle) {
  Rng rng(6);
  TabularMDP mdp = sample_random_mdp(6, 3, 0.95, rng);
  TabularPolicy pi = sample_random_policy(6, 3, rng);
  const auto seq = state_marginals(mdp, pi, 20);

  // independent oracle: build the kernel with plain loops, then repeated
  // matrix-vector products
  std::vector<std::vector<double>> kernel(6, std::vector<double>(6, 0.0));
  for (int s = 0; s < 6; ++s)
    for (int a = 0; a < 3; ++a)
      for (int s2 = 0; s2 < 6; ++s2)
        kernel[s][s2] += pi.probs(s, a) * mdp.transition[static_cast<std::size_t>(a)](s, s2);
  std::vector<double> mu(6);
  for (int s = 0; s < 6; ++s) mu[static_cast<std::size_t>(s)] = mdp.rho0(s);
  for (int t = 0; t <= 20; ++t) {
    for (int s = 0; s < 6; ++s)
      EXPECT_NEAR(seq.marginals[static_cast<std::size_t>(t)](s), mu[static_cast<std::size_t>(s)],
                  1e-12);
    std::vector<double> next(6, 0.0);
    for (int s = 0; s < 6; ++s)
      for (int s2 = 0; s2 < 6; ++s2) next[static_cast<std::size_t>(s2)] += mu[static_cast<std::size_t>(s)] * kernel[s][s2];
    mu = next;
  }
}

TEST(TvDistance, KnownValues) {
  Vector p(2), q(2);
  p << 0.5, 0.5;
  q << 0.5, 0.5;
  EXPECT_DOUBLE_EQ(tv_distance(p, q), 0.0);
  p << 1, 0;
  q << 0, 1;
  EXPECT_DOUBLE_EQ(tv_distance(p, q), 1.0);
  p << 0.5, 0.5;
  q << 0.75, 0.25;
  EXPECT_DOUBLE_EQ(tv_distance(p, q), 0.25);
  Vector r(3);
  EXPECT_THROW(tv_distance(p, r), std::invalid_argument);
}

TEST(TvDistance, MetricAxiomsOnSampledTriples) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const int n = 2 + rng.uniform_int(5);
    auto draw = [&] {
      Vector v(n);
      const auto d = rng.dirichlet_flat(n);
      for (int j = 0; j < n; ++j) v(j) = d[static_cast<std::size_t>(j)];
      return v;
    };
    const Vector a = draw(), b = draw(), c = draw();
    EXPECT_NEAR(tv_distance(a, b), tv_distance(b, a), 1e-15);
    EXPECT_NEAR(tv_distance(a, a), 0.0, 1e-15);
    EXPECT_LE(tv_distance(a, c), tv_distance(a, b) + tv_distance(b, c) + 1e-15);
    EXPECT_GE(tv_distance(a, b), 0.0);
    EXPECT_LE(tv_distance(a, b), 1.0 + 1e-15);
  }
}

TEST(PolicyDivergences, IdenticalPoliciesAreZero) {
  Rng rng(8);
  TabularPolicy pi = sample_random_policy(4, 3, rng);
  const auto d = policy_divergences(pi, pi);
  EXPECT_DOUBLE_EQ(d.eps_pi_max, 0.0);
  EXPECT_DOUBLE_EQ(d.kl_max, 0.0);
}

TEST(PolicyDivergences, HandComputedCase) {
  TabularPolicy pi, pid;
  pi.probs = Matrix(1, 2);
  pi.probs << 1, 0;
  pid.probs = Matrix(1, 2);
  pid.probs << 0.5, 0.5;
  const auto d = policy_divergences(pi, pid);
  EXPECT_NEAR(d.eps_pi_max, 0.5, 1e-15);
  EXPECT_NEAR(d.kl_max, std::log(2.0), 1e-15);
  EXPECT_TRUE(d.pinsker_holds());

  // mass where the reference has none: infinite KL, not an error
  const auto rev = policy_divergences(pid, pi);
  EXPECT_TRUE(std::isinf(rev.kl_max));
}

TEST(PolicyDivergences, PinskerOnRandomPairs) {
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const int s = 1 + rng.uniform_int(5), a = 2 + rng.uniform_int(4);
    const auto d = policy_divergences(sample_random_policy(s, a, rng),
                                      sample_random_policy(s, a, rng));
    EXPECT_TRUE(d.pinsker_holds());
  }
}

TEST(ModelEpsilonM, IdenticalKernelsGiveZero) {
  Rng rng(10);
  TabularMDP mdp = sample_random_mdp(5, 2, 0.9, rng);
  TabularPolicy pi = sample_random_policy(5, 2, rng);
  EXPECT_DOUBLE_EQ(model_epsilon_m(mdp, mdp, pi, 50), 0.0);
  EXPECT_THROW(model_epsilon_m(mdp, mdp, pi, 0), std::invalid_argument);
}

TEST(ModelEpsilonM, UnreachableStatePerturbationIsInvisible) {
  // states {0,1} communicate, state 2 is unreachable from rho0
  TabularMDP mdp;
  mdp.num_states = 3;
  mdp.num_actions = 1;
  Matrix p(3, 3);
  p << 0.5, 0.5, 0, 0.7, 0.3, 0, 0, 0, 1;
  mdp.transition = {p};
  mdp.reward = Matrix::Zero(3, 1);
  mdp.gamma = 0.9;
  mdp.rho0 = Vector(3);
  mdp.rho0 << 1, 0, 0;
  TabularMDP model = mdp;
  model.transition[0].row(2) << 0.5, 0.5, 0;  // differs only at the unreachable state
  TabularPolicy pi;
  pi.probs = Matrix::Ones(3, 1);
  EXPECT_DOUBLE_EQ(model_epsilon_m(mdp, model, pi, 100), 0.0);
}

TEST(ModelEpsilonM, MatchesEnumerationOracle) {
  Rng rng(11);
  TabularMDP truth = sample_random_mdp(5, 3, 0.9, rng);
  TabularMDP model = perturb_mdp_kernel(truth, 0.25, rng);
  TabularPolicy pid = sample_random_policy(5, 3, rng);
  const int horizon = 40;
  const double eps = model_epsilon_m(truth, model, pid, horizon);

  // oracle: direct summation over all (t, s, a) with plain loops
  std::vector<double> mu(5);
  for (int s = 0; s < 5; ++s) mu[static_cast<std::size_t>(s)] = truth.rho0(s);
  double worst = 0.0;
  for (int t = 0; t <= horizon; ++t) {
    double v = 0.0;
    for (int s = 0; s < 5; ++s)
      for (int a = 0; a < 3; ++a) {
        double tv = 0.0;
        for (int s2 = 0; s2 < 5; ++s2)
          tv += std::abs(truth.transition[static_cast<std::size_t>(a)](s, s2) -
                         model.transition[static_cast<std::size_t>(a)](s, s2));
        v += mu[static_cast<std::size_t>(s)] * pid.probs(s, a) * 0.5 * tv;
      }
    worst = std::max(worst, v);
    std::vector<double> next(5, 0.0);
    for (int s = 0; s < 5; ++s)
      for (int a = 0; a < 3; ++a)
        for (int s2 = 0; s2 < 5; ++s2)
          next[static_cast<std::size_t>(s2)] +=
              mu[static_cast<std::size_t>(s)] * pid.probs(s, a) *
              truth.transition[static_cast<std::size_t>(a)](s, s2);
    mu = next;
  }
  EXPECT_NEAR(eps, worst, 1e-12);
}

TEST(BranchedReturns, KZeroReducesToExactReturns) {
  Rng rng(12);
  TabularMDP pre = sample_random_mdp(5, 2, 0.9, rng);
  TabularMDP post = perturb_mdp_kernel(pre, 0.3, rng);
  TabularPolicy pre_pi = sample_random_policy(5, 2, rng);
  TabularPolicy post_pi = sample_random_policy(5, 2, rng);
  const int h = horizon_for_tail(0.9, 1.0, 1e-10);
  EXPECT_NEAR(branched_returns(pre, pre_pi, post, post_pi, 0, h), exact_returns(pre, pre_pi),
              1e-9);
}

TEST(BranchedReturns, IdenticalBranchIsInvisible) {
  Rng rng(13);
  TabularMDP pre = sample_random_mdp(6, 3, 0.85, rng);
  TabularPolicy pi = sample_random_policy(6, 3, rng);
  const int h = horizon_for_tail(0.85, 1.0, 1e-10);
  const double eta = exact_returns(pre, pi);
  for (int k : {1, 3, 7}) {
    EXPECT_NEAR(branched_returns(pre, pi, pre, pi, k, h), eta, 1e-9);
  }
}

TEST(BranchedReturns, MatchesMonteCarloOracle) {
  Rng rng(14);
  TabularMDP pre = sample_random_mdp(4, 2, 0.9, rng);
  TabularMDP post = perturb_mdp_kernel(pre, 0.3, rng);
  TabularPolicy pre_pi = sample_random_policy(4, 2, rng);
  TabularPolicy post_pi = sample_random_policy(4, 2, rng);
  const int h = horizon_for_tail(0.9, 1.0, 1e-10);
  const double eta = branched_returns(pre, pre_pi, post, post_pi, 3, h);
  const auto mc = mc_branched_returns(pre, pre_pi, post, post_pi, 3, 200000, 55);
  EXPECT_NEAR(eta, mc.mean, 3.0 * mc.stderr_mean + 1e-4);
}

TEST(BranchedReturns, InsufficientHorizonThrows) {
  Rng rng(15);
  TabularMDP mdp = sample_random_mdp(3, 2, 0.99, rng);
  TabularPolicy pi = sample_random_policy(3, 2, rng);
  EXPECT_THROW(branched_returns(mdp, pi, mdp, pi, 1, 10), std::invalid_argument);
}

TEST(BranchedReturns, ContinuityInPostKernelPerturbation) {
  // perturbing only the post kernel moves the result by at most the plain
  // returns-gap penalty evaluated at the measured kernel error
  Rng rng(16);
  for (int i = 0; i < 30; ++i) {
    const double gamma = rng.uniform(0.5, 0.95);
    TabularMDP pre = sample_random_mdp(4, 2, gamma, rng);
    TabularMDP post = perturb_mdp_kernel(pre, rng.uniform(0.0, 0.3), rng);
    TabularMDP post2 = perturb_mdp_kernel(post, rng.uniform(0.0, 0.3), rng);
    TabularPolicy pre_pi = sample_random_policy(4, 2, rng);
    TabularPolicy post_pi = sample_random_policy(4, 2, rng);
    const int k = rng.uniform_int(6);
    const int h = horizon_for_tail(gamma, 1.0, 1e-10);
    const double a = branched_returns(pre, pre_pi, post, post_pi, k, h);
    const double b = branched_returns(pre, pre_pi, post2, post_pi, k, h);
    const double delta = kernel_tv_max_state(post, post2, post_pi);
    const double penalty = 2.0 * 1.0 * gamma * delta / ((1.0 - gamma) * (1.0 - gamma));
    EXPECT_LE(std::abs(a - b), penalty + 1e-9);
  }
}
