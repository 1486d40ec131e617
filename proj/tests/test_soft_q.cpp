#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dsqil/env.hpp"
#include "dsqil/soft_q.hpp"
#include "test_support.hpp"

using namespace dsqil;
using fixtures::finite_difference_check;
using fixtures::random_vector;

namespace {

// Extended-precision log-sum-exp used as an independent oracle.
long double lse_long(const Eigen::VectorXd& q) {
  long double m = q.maxCoeff();
  long double s = 0.0L;
  for (Eigen::Index i = 0; i < q.size(); ++i) s += std::exp(static_cast<long double>(q[i]) - m);
  return m + std::log(s);
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

EnvSpec toy_spec(int obs_dim, int actions) {
  EnvSpec s;
  s.name = "toy";
  s.obs_dim = obs_dim;
  s.action_kind = ActionKind::Discrete;
  s.action_dim = actions;
  s.max_steps = 10;
  return s;
}

DiscreteAgent small_agent(std::uint64_t seed, int obs_dim = 3, int actions = 2, double gamma = 0.9) {
  Rng rng(seed);
  DiscreteAgent agent = DiscreteAgent::create(toy_spec(obs_dim, actions), {1, 6, 3e-4, gamma, 5e-3}, rng);
  Rng other(seed + 1000);
  agent.target = nn::init_params(agent.q.spec, other);  // distinct target net
  return agent;
}

/// Linear single-layer agent whose Q is exactly its bias vector on a zero input.
DiscreteAgent bias_agent(const Eigen::VectorXd& q, double gamma) {
  const auto spec = nn::MlpSpec::make(1, 0, 1, static_cast<int>(q.size()), nn::Activation::ReLU,
                                      nn::Activation::Identity);
  nn::MlpParams p = nn::ParamTree::zeros(spec);
  p.layers[0].bias = q;
  return DiscreteAgent{{spec, p}, p, nn::AdamState::for_params(p), gamma, 3e-4, 5e-3};
}

std::vector<Transition> random_batch(Rng& rng, int n, int obs_dim, int actions, Source src) {
  std::vector<Transition> batch;
  for (int i = 0; i < n; ++i) {
    const bool done = i % 3 == 0;
    batch.push_back({random_vector(rng, obs_dim), ActionValue::discrete(static_cast<int>(rng.index(actions))),
                     done ? Eigen::VectorXd::Zero(obs_dim) : random_vector(rng, obs_dim), done, src, 0});
  }
  return batch;
}

}  // namespace

TEST(SoftValue, Examples) {
  EXPECT_EQ(soft_value(vec({2.5})), 2.5);
  EXPECT_NEAR(soft_value(vec({0, 0})), std::log(2.0), 1e-15);
  EXPECT_NEAR(soft_value(vec({1, 2, 3})), static_cast<double>(lse_long(vec({1, 2, 3}))), 1e-14);
  EXPECT_NEAR(soft_value(vec({1, 2, 3})), 3.407606, 1e-6);
}

TEST(SoftValue, RejectsNonFinite) {
  EXPECT_THROW(soft_value(vec({0, std::nan("")})), NonFiniteError);
  EXPECT_THROW(boltzmann_policy(vec({0, INFINITY})), NonFiniteError);
  EXPECT_THROW(soft_value(Eigen::VectorXd()), PreconditionError);
}

TEST(Boltzmann, Examples) {
  const Eigen::VectorXd u = boltzmann_policy(vec({0, 0, 0}));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(u[i], 1.0 / 3.0, 1e-16);
  const Eigen::VectorXd p = boltzmann_policy(vec({std::log(2.0), 0}));
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
  const Eigen::VectorXd big = boltzmann_policy(vec({1000, 0}));
  EXPECT_TRUE(big.allFinite());
  EXPECT_GE(big[0], 1.0 - 1e-300);
}

TEST(SoftMath, IdentitiesOnRandomVectors) {
  Rng rng(1);
  for (int trial = 0; trial < 10'000; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(8));
    const double scale = trial % 2 ? 1e3 : 5.0;
    const Eigen::VectorXd q = random_vector(rng, n, scale);
    const Eigen::VectorXd p = boltzmann_policy(q);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_TRUE((p.array() >= 0.0).all());
    const double v = soft_value(q);
    EXPECT_GE(v, q.maxCoeff());
    EXPECT_LE(v - q.maxCoeff(), std::log(static_cast<double>(n)) + 1e-12);
    const Eigen::VectorXd lp = log_boltzmann_policy(q);
    for (int a = 0; a < n; ++a) EXPECT_NEAR(lp[a], q[a] - v, 1e-10 * std::max(1.0, std::abs(q[a])));
  }
}

TEST(SoftMath, StrictPositivityAtModerateScale) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::VectorXd p = boltzmann_policy(random_vector(rng, 4, 50.0));
    EXPECT_TRUE((p.array() > 0.0).all());
  }
}

TEST(SoftMath, BatchHelpersMatchScalarForms) {
  Rng rng(3);
  Eigen::MatrixXd q(3, 5);
  for (int j = 0; j < 5; ++j) q.col(j) = random_vector(rng, 3, 10.0);
  const Eigen::VectorXd v = soft_values(q);
  const Eigen::MatrixXd p = softmax_columns(q);
  for (int j = 0; j < 5; ++j) {
    EXPECT_EQ(v[j], soft_value(q.col(j)));
    EXPECT_EQ(p.col(j), boltzmann_policy(q.col(j)));
  }
}

TEST(BcLoss, UniformQGivesLogN) {
  const DiscreteAgent agent = bias_agent(vec({0.7, 0.7, 0.7, 0.7}), 0.99);
  std::vector<Transition> batch;
  for (int a = 0; a < 4; ++a) {
    batch.push_back({Eigen::VectorXd::Zero(1), ActionValue::discrete(a), Eigen::VectorXd::Zero(1), false,
                     Source::Demo, 0});
  }
  EXPECT_NEAR(bc_loss(agent, batch).loss, 4.0 * std::log(4.0), 1e-14);
}

TEST(BcLoss, SaturatedLikelihoodVanishes) {
  const DiscreteAgent agent = bias_agent(vec({50, 0}), 0.99);
  const std::vector<Transition> batch{
      {Eigen::VectorXd::Zero(1), ActionValue::discrete(0), Eigen::VectorXd::Zero(1), false, Source::Demo, 0}};
  EXPECT_LT(bc_loss(agent, batch).loss, 1e-20);
}

TEST(BcLoss, EqualsNegativeSumOfLogPolicy) {
  Rng rng(4);
  const DiscreteAgent agent = small_agent(4, 3, 3);
  const auto batch = random_batch(rng, 7, 3, 3, Source::Demo);
  double oracle = 0.0;
  for (const auto& t : batch) {
    const Eigen::VectorXd q = nn::forward(agent.q.spec, agent.q.params, t.state);
    oracle -= std::log(boltzmann_policy(q)[t.action.index()]);
  }
  EXPECT_NEAR(bc_loss(agent, batch).loss, oracle, 1e-10);
}

TEST(BcLoss, RejectsEmptyAndSampleBatches) {
  Rng rng(5);
  const DiscreteAgent agent = small_agent(5);
  EXPECT_THROW(bc_loss(agent, {}), PreconditionError);
  EXPECT_THROW(bc_loss(agent, random_batch(rng, 2, 3, 2, Source::Sample)), PreconditionError);
}

TEST(BcLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const DiscreteAgent agent = small_agent(seed, 3, 2);
    const auto batch = random_batch(rng, 6, 3, 2, Source::Demo);
    const LossAndGrad lg = bc_loss(agent, batch);
    auto loss = [&](const nn::ParamTree& p) {
      DiscreteAgent a = agent;
      a.q.params = p;
      return bc_loss(a, batch).loss;
    };
    EXPECT_LT(finite_difference_check(agent.q.params, lg.grad, loss).relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(SoftBellman, AbsorbingExample) {
  const DiscreteAgent agent = bias_agent(vec({0.5, -3.0}), 0.99);
  const std::vector<Transition> batch{
      {Eigen::VectorXd::Zero(1), ActionValue::discrete(0), Eigen::VectorXd::Zero(1), true, Source::Demo, 0}};
  const std::vector<double> r{1.0};
  EXPECT_DOUBLE_EQ(soft_bellman_error(agent, batch, r).loss, 0.25);
}

TEST(SoftBellman, MeanInvariantToDuplication) {
  Rng rng(6);
  const DiscreteAgent agent = small_agent(6);
  const auto one = random_batch(rng, 1, 3, 2, Source::Sample);
  const std::vector<Transition> many(5, one[0]);
  const double a = soft_bellman_error(agent, one, std::vector<double>{0.3}).loss;
  const double b = soft_bellman_error(agent, many, std::vector<double>(5, 0.3)).loss;
  EXPECT_NEAR(a, b, 1e-15);
}

TEST(SoftBellman, NonTerminalLogTwoExample) {
  DiscreteAgent agent = bias_agent(vec({0.0, 0.0}), 1.0);
  const std::vector<Transition> batch{
      {Eigen::VectorXd::Zero(1), ActionValue::discrete(1), Eigen::VectorXd::Zero(1), false, Source::Sample, 0}};
  const double want = std::log(2.0) * std::log(2.0);
  EXPECT_NEAR(soft_bellman_error(agent, batch, std::vector<double>{0.0}).loss, want, 1e-15);
  EXPECT_NEAR(want, 0.480453, 1e-6);
}

TEST(SoftBellman, UsesTargetNetworkForBootstrap) {
  DiscreteAgent agent = bias_agent(vec({0.0, 0.0}), 1.0);
  agent.target.layers[0].bias = vec({1.0, 1.0});
  const std::vector<Transition> batch{
      {Eigen::VectorXd::Zero(1), ActionValue::discrete(0), Eigen::VectorXd::Zero(1), false, Source::Sample, 0}};
  const double y = 1.0 + std::log(2.0);
  EXPECT_NEAR(soft_bellman_error(agent, batch, std::vector<double>{0.0}).loss, y * y, 1e-14);
}

TEST(SoftBellman, RejectsLengthMismatch) {
  Rng rng(7);
  const DiscreteAgent agent = small_agent(7);
  const auto batch = random_batch(rng, 3, 3, 2, Source::Sample);
  EXPECT_THROW(soft_bellman_error(agent, batch, std::vector<double>{1.0, 2.0}), DimensionError);
}

TEST(SoftBellman, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(50 + seed);
    const DiscreteAgent agent = small_agent(50 + seed, 3, 3);
    const auto batch = random_batch(rng, 6, 3, 3, Source::Sample);
    std::vector<double> rewards;
    for (int i = 0; i < 6; ++i) rewards.push_back(rng.uniform());
    const LossAndGrad lg = soft_bellman_error(agent, batch, rewards);
    auto loss = [&](const nn::ParamTree& p) {
      DiscreteAgent a = agent;
      a.q.params = p;
      return soft_bellman_error(a, batch, rewards).loss;
    };
    EXPECT_LT(finite_difference_check(agent.q.params, lg.grad, loss).relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(DiscreteAgent, SampleActionFollowsBoltzmann) {
  const DiscreteAgent agent = bias_agent(vec({std::log(3.0), 0.0}), 0.99);
  Rng rng(8);
  int zeros = 0;
  const int n = 40'000;
  for (int i = 0; i < n; ++i) zeros += agent.sample_action(Eigen::VectorXd::Zero(1), rng) == 0;
  EXPECT_NEAR(static_cast<double>(zeros) / n, 0.75, 0.01);
  EXPECT_EQ(agent.greedy_action(Eigen::VectorXd::Zero(1)), 0);
}
