#pragma once

// Small, deterministic training scenarios shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "dsqil/discriminator.hpp"
#include "dsqil/env.hpp"
#include "dsqil/imitation.hpp"
#include "dsqil/replay.hpp"
#include "dsqil/sac.hpp"
#include "dsqil/soft_q.hpp"
#include "test_support.hpp"

namespace dsqil::fixtures {

/// Value-iteration demonstrations on an n x n grid from the fixed start.
inline std::shared_ptr<ReplayBuffer> grid_demos(int n, int trajectories, double gamma = 0.99) {
  GridWorld env(n, 50, 0, gamma);
  const Policy expert = gridworld_expert_policy(env, value_iteration(env, gamma));
  auto buffer = std::make_shared<ReplayBuffer>(env.spec());
  for (int traj = 0; traj < trajectories; ++traj) {
    Observation o = env.reset(StartMode::Fixed);
    while (true) {
      const ActionValue a = expert(o);
      const StepResult r = env.step(a);
      buffer->push({o, a, r.next_obs, r.done, Source::Demo, traj});
      o = r.next_obs;
      if (r.done || r.truncated) break;
    }
  }
  return buffer;
}

/// Uniform-random rollouts, tagged as samples.
inline std::vector<Transition> random_rollouts(Environment& env, int episodes, Rng& rng) {
  std::vector<Transition> out;
  const EnvSpec& spec = env.spec();
  for (int e = 0; e < episodes; ++e) {
    Observation o = env.reset(StartMode::Fixed);
    while (true) {
      const ActionValue a = spec.action_kind == ActionKind::Discrete
                                ? ActionValue::discrete(static_cast<int>(rng.index(static_cast<std::size_t>(spec.action_dim))))
                                : ActionValue::continuous(random_vector(rng, spec.action_dim, 0.99));
      const StepResult r = env.step(a);
      out.push_back({o, a, r.next_obs, r.done, Source::Sample, e});
      o = r.next_obs;
      if (r.done || r.truncated) break;
    }
  }
  return out;
}

inline DiscreteAgent small_discrete_agent(const EnvSpec& spec, std::uint64_t seed, double gamma = 0.9) {
  DiscreteAgentConfig cfg;
  cfg.hidden_layers = 2;
  cfg.hidden_width = 16;
  cfg.lr = 1e-3;
  cfg.gamma = gamma;
  cfg.polyak = 0.05;
  Rng rng(seed);
  return DiscreteAgent::create(spec, cfg, rng);
}

inline SacAgent small_sac_agent(const EnvSpec& spec, std::uint64_t seed) {
  SacConfig cfg;
  cfg.hidden_layers = 2;
  cfg.hidden_width = 16;
  Rng rng(seed);
  return SacAgent::create(spec, cfg, rng);
}

inline double max_abs_diff(const nn::ParamTree& a, const nn::ParamTree& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
  return m;
}

struct DegeneracyReport {
  double max_param_diff = 0.0;  // over every update and every parameter
  double max_loss_diff = 0.0;
  int updates = 0;
};

inline double agent_param_diff(const Agent& a, const Agent& b) {
  if (const auto* qa = std::get_if<DiscreteAgent>(&a)) {
    const auto& qb = std::get<DiscreteAgent>(b);
    return std::max(max_abs_diff(qa->q.params, qb.q.params), max_abs_diff(qa->target, qb.target));
  }
  const auto& sa = std::get<SacAgent>(a);
  const auto& sb = std::get<SacAgent>(b);
  double m = max_abs_diff(sa.actor.params, sb.actor.params);
  for (std::size_t k = 0; k < 2; ++k) {
    m = std::max(m, max_abs_diff(sa.critics[k].params, sb.critics[k].params));
    m = std::max(m, max_abs_diff(sa.targets[k], sb.targets[k]));
  }
  return std::max(m, std::abs(sa.log_alpha - sb.log_alpha));
}

/// Runs SQIL and DSQIL-with-source-stub side by side from identical states.
inline DegeneracyReport sqil_dsqil_degeneracy(bool continuous, int updates, std::uint64_t seed = 0) {
  std::shared_ptr<const ReplayBuffer> demo;
  std::vector<Transition> samples;
  Agent agent;
  Rng rng(seed);
  if (continuous) {
    PointMass env(2, 20, seed);
    auto buffer = std::make_shared<ReplayBuffer>(env.spec());
    for (auto t : random_rollouts(env, 3, rng)) {
      t.source = Source::Demo;
      buffer->push(t);
    }
    demo = buffer;
    samples = random_rollouts(env, 3, rng);
    agent = small_sac_agent(env.spec(), seed);
  } else {
    GridWorld env(5, 50, seed);
    demo = grid_demos(5, 4);
    samples = random_rollouts(env, 4, rng);
    agent = small_discrete_agent(env.spec(), seed);
  }
  ImitationConfig cfg;
  cfg.batch_size = 16;
  cfg.algorithm = Algorithm::SQIL;
  TrainState sqil(cfg, agent, demo, nullptr, seed);
  cfg.algorithm = Algorithm::DSQIL;
  TrainState dsqil(cfg, agent, demo, std::make_unique<SourceStubDiscriminator>(), seed);
  for (const auto& t : samples) {
    sqil.push_sample(t);
    dsqil.push_sample(t);
  }
  DegeneracyReport report;
  for (int i = 0; i < updates; ++i) {
    const StepStats a = sqil_train_step(sqil, cfg.batch_size);
    const StepStats b = dsqil_train_step(dsqil, cfg.batch_size);
    report.max_loss_diff = std::max(report.max_loss_diff, std::abs(a.agent_loss - b.agent_loss));
    report.max_param_diff = std::max(report.max_param_diff, agent_param_diff(sqil.agent, dsqil.agent));
    ++report.updates;
  }
  return report;
}

/// gamma = 1 toy: two 3-step demos on a 2x2 grid from the origin, each
/// opening with a wall bump and ending in the absorbing goal, plus a few
/// random sample transitions.
struct ToyProblem {
  DiscreteAgent agent;
  ReplayBuffer demo;
  ReplayBuffer samp;
  std::vector<double> demo_rewards;
  std::vector<double> samp_rewards;
};

inline ToyProblem three_step_toy(std::uint64_t seed, double demo_reward = 0.0) {
  GridWorld env(2, 10, 0, 1.0);
  ToyProblem toy{small_discrete_agent(env.spec(), seed, 1.0), ReplayBuffer(env.spec()), ReplayBuffer(env.spec()), {}, {}};
  const int plans[2][3] = {{GridWorld::kUp, GridWorld::kDown, GridWorld::kRight},
                           {GridWorld::kLeft, GridWorld::kRight, GridWorld::kDown}};
  for (int traj = 0; traj < 2; ++traj) {
    Observation o = env.reset(StartMode::Fixed);
    for (int a : plans[traj]) {
      const StepResult r = env.step(ActionValue::discrete(a));
      toy.demo.push({o, ActionValue::discrete(a), r.next_obs, r.done, Source::Demo, traj});
      o = r.next_obs;
    }
  }
  Rng rng(seed + 17);
  for (const auto& t : random_rollouts(env, 2, rng)) toy.samp.push(t);
  toy.demo_rewards.assign(toy.demo.size(), demo_reward);
  for (std::size_t i = 0; i < toy.samp.size(); ++i) toy.samp_rewards.push_back(rng.uniform(0.0, 0.5));
  return toy;
}

inline double relative_gap(const nn::ParamTree& a, const nn::ParamTree& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a.flat(i) - b.flat(i)) * (a.flat(i) - b.flat(i));
    na += a.flat(i) * a.flat(i);
    nb += b.flat(i) * b.flat(i);
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale > 0.0 ? std::sqrt(diff) / scale : 0.0;
}

struct DerivationReport {
  double residual_rel = 0.0;       // direct vs completed-square form, full gradient
  double semi_gradient_rel = 0.0;  // direct vs unrolled form, bootstrap held constant
  double loss_offset_error = 0.0;  // |(telescoped - direct) - constant|
  double telescoping_error = 0.0;  // max |sum_t (V_t - V_{t+1}) - V_0|
  double terminal_value = 0.0;     // max |V| at absorbed next states
};

inline DerivationReport derivation_identity(std::uint64_t seed, double lambda_demo = 1.0, double lambda_samp = 1.0) {
  const ToyProblem toy = three_step_toy(seed, 0.25);
  const RbcGradients res = rbc_gradient_oracle(toy.agent, toy.demo, toy.samp, toy.demo_rewards, toy.samp_rewards,
                                               lambda_demo, lambda_samp, GradientConvention::Residual);
  const RbcGradients semi = rbc_gradient_oracle(toy.agent, toy.demo, toy.samp, toy.demo_rewards, toy.samp_rewards,
                                                lambda_demo, lambda_samp, GradientConvention::SemiGradient);
  DerivationReport r;
  r.residual_rel = relative_gap(res.direct, res.telescoped);
  r.semi_gradient_rel = relative_gap(semi.direct, semi.unrolled);
  // Completing the square leaves sum(R) + N / (4 lambda_demo) behind.
  double constant = 0.0;
  for (double x : toy.demo_rewards) constant += x;
  constant += static_cast<double>(toy.demo.size()) / (4.0 * lambda_demo);
  r.loss_offset_error = std::abs((res.telescoped_loss - res.direct_loss) - constant);
  for (std::size_t i = 0; i < res.telescoping_sums.size(); ++i) {
    r.telescoping_error = std::max(r.telescoping_error, std::abs(res.telescoping_sums[i] - res.initial_values[i]));
  }
  for (std::size_t i = 0; i < toy.demo.size(); ++i) {
    if (toy.demo[i].done) {
      r.terminal_value = std::max(r.terminal_value, std::abs(res.demo_targets[i] - toy.demo_rewards[i] -
                                                              1.0 / (2.0 * lambda_demo)));
    }
  }
  return r;
}

/// Two Gaussian (s, a) clouds on either side of a line, 1-D actions.
inline EnvSpec cloud_spec() {
  EnvSpec s;
  s.name = "toy";
  s.obs_dim = 2;
  s.action_kind = ActionKind::Continuous;
  s.action_dim = 1;
  s.max_steps = 10;
  return s;
}

inline std::vector<Transition> cloud(Rng& rng, int n, double center, Source src) {
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd s(2);
    s << center + 0.3 * rng.normal(), center + 0.3 * rng.normal();
    const double a = std::clamp(center / 2.0 + 0.1 * rng.normal(), -1.0, 1.0);
    out.push_back({s, ActionValue::continuous(Eigen::VectorXd::Constant(1, a)), s, false, src, 0});
  }
  return out;
}

struct SeparabilityReport {
  double demo_mean = 0.0;
  double samp_mean = 1.0;
  int updates = 0;
};

/// Default-architecture discriminator trained on the two clouds, scored on
/// fresh draws.
inline SeparabilityReport separability(int updates, std::uint64_t seed = 10) {
  Rng rng(seed);
  Discriminator d(cloud_spec(), {}, rng);
  ReplayBuffer demo_buf(cloud_spec()), samp_buf(cloud_spec());
  for (const auto& t : cloud(rng, 2048, 1.0, Source::Demo)) demo_buf.push(t);
  for (const auto& t : cloud(rng, 2048, -1.0, Source::Sample)) samp_buf.push(t);
  SeparabilityReport r;
  for (int i = 0; i < updates; ++i) {
    const auto db = sample_minibatch(demo_buf, d.batch_size(), rng);
    const auto sb = sample_minibatch(samp_buf, d.batch_size(), rng);
    if (disc_update(d, db, sb, samp_buf.size()).status == UpdateStatus::Updated) ++r.updates;
  }
  r.demo_mean = d.evaluate(cloud(rng, 1000, 1.0, Source::Demo)).mean();
  r.samp_mean = d.evaluate(cloud(rng, 1000, -1.0, Source::Sample)).mean();
  return r;
}

}  // namespace dsqil::fixtures
