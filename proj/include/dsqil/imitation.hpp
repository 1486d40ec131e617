#pragma once

// Behavioral cloning, SQIL and DSQIL training steps, the per-episode
// interaction loop, and a two-route gradient check of the DSQIL objective.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "dsqil/discriminator.hpp"
#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/nn.hpp"
#include "dsqil/replay.hpp"
#include "dsqil/rng.hpp"
#include "dsqil/sac.hpp"
#include "dsqil/soft_q.hpp"

namespace dsqil {

enum class Algorithm { BC, SQIL, DSQIL };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::BC: return "bc";
    case Algorithm::SQIL: return "sqil";
    case Algorithm::DSQIL: return "dsqil";
  }
  return "bc";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "bc") return Algorithm::BC;
  if (s == "sqil") return Algorithm::SQIL;
  if (s == "dsqil") return Algorithm::DSQIL;
  throw PreconditionError("unknown algorithm '" + s + "'");
}

struct ImitationConfig {
  Algorithm algorithm = Algorithm::DSQIL;
  double lambda_demo = 1.0;
  double lambda_samp = 1.0;
  std::size_t batch_size = 64;      // m, per buffer (1:1 demo/sample ratio)
  int updates_per_episode = 0;      // 0: one update after every environment step
  std::size_t samp_capacity = 1'000'000;
  StartMode train_start = StartMode::Fixed;

  void validate() const {
    if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
    if (lambda_demo < 0.0 || lambda_samp < 0.0) throw PreconditionError("lambda values must be >= 0");
    if (algorithm == Algorithm::DSQIL && !(lambda_demo > 0.0)) {
      throw PreconditionError("DSQIL needs lambda_demo > 0");
    }
    if (updates_per_episode < 0) throw PreconditionError("updates_per_episode must be >= 0");
    if (samp_capacity < 1) throw PreconditionError("samp_capacity must be >= 1");
  }
};

using Agent = std::variant<DiscreteAgent, SacAgent>;

/// Rewards handed to the agent update on one train step.
struct RewardEvent {
  std::span<const Transition> demo;
  std::span<const Transition> samp;
  std::span<const double> demo_rewards;
  std::span<const double> samp_rewards;
  const DiscriminatorModel* discriminator = nullptr;  // null for SQIL
};

struct StepStats {
  double agent_loss = 0.0;
  double disc_loss = 0.0;
  bool disc_updated = false;
  double demo_reward_mean = 0.0;
  double samp_reward_mean = 0.0;
};

/// Everything one training run mutates. The demonstration buffer is shared
/// read-only; only the sample buffer grows.
class TrainState {
 public:
  TrainState(ImitationConfig cfg, Agent agent, std::shared_ptr<const ReplayBuffer> demo,
             std::unique_ptr<DiscriminatorModel> discriminator, std::uint64_t seed)
      : config(cfg),
        agent(std::move(agent)),
        discriminator(std::move(discriminator)),
        demo_(std::move(demo)),
        samp_(demo_ ? demo_->spec() : EnvSpec{}, cfg.samp_capacity),
        seed_(seed) {
    config.validate();
    if (!demo_) throw PreconditionError("TrainState needs a demonstration buffer");
    Rng root(seed);
    sample_rng = root.split();
    disc_rng = root.split();
    policy_rng = root.split();
    agent_rng = root.split();
    if (config.algorithm == Algorithm::DSQIL && !this->discriminator) {
      throw PreconditionError("DSQIL needs a discriminator");
    }
  }

  ImitationConfig config;
  Agent agent;
  std::unique_ptr<DiscriminatorModel> discriminator;
  std::int64_t episode = 0;
  Rng sample_rng;  // agent minibatches
  Rng disc_rng;    // discriminator minibatches
  Rng policy_rng;  // exploration during rollouts
  Rng agent_rng;   // SAC noise
  std::function<void(const RewardEvent&)> reward_probe;

  const ReplayBuffer& demo() const { return *demo_; }
  const ReplayBuffer& samp() const { return samp_; }
  void push_sample(Transition t) {
    t.source = Source::Sample;
    samp_.push(std::move(t));
  }
  std::uint64_t seed() const { return seed_; }
  bool is_discrete() const { return std::holds_alternative<DiscreteAgent>(agent); }

 private:
  std::shared_ptr<const ReplayBuffer> demo_;
  ReplayBuffer samp_;
  std::uint64_t seed_;
};

namespace detail {

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// lambda_demo * delta^2(demo, r_demo) + lambda_samp * delta^2(samp, r_samp), one optimizer step.
inline double agent_update(TrainState& state, std::span<const Transition> demo, std::span<const Transition> samp,
                           std::span<const double> demo_rewards, std::span<const double> samp_rewards) {
  const double ld = state.config.lambda_demo;
  const double ls = state.config.lambda_samp;
  if (auto* q = std::get_if<DiscreteAgent>(&state.agent)) {
    LossAndGrad d = soft_bellman_error(*q, demo, demo_rewards);
    LossAndGrad s = soft_bellman_error(*q, samp, samp_rewards);
    nn::Gradient grad = nn::ParamTree::zeros_like(q->q.params);
    grad.axpy(ld, d.grad);
    grad.axpy(ls, s.grad);
    nn::adam_step(q->q.params, grad, q->adam, q->lr);
    nn::polyak_update(q->target, q->q.params, q->polyak);
    return ld * d.loss + ls * s.loss;
  }
  auto& sac = std::get<SacAgent>(state.agent);
  std::vector<Transition> joined(demo.begin(), demo.end());
  joined.insert(joined.end(), samp.begin(), samp.end());
  std::vector<double> rewards(demo_rewards.begin(), demo_rewards.end());
  rewards.insert(rewards.end(), samp_rewards.begin(), samp_rewards.end());
  const ContinuousBatch b = ContinuousBatch::from(joined);
  Eigen::VectorXd weights(b.states.cols());
  const auto nd = static_cast<Eigen::Index>(demo.size());
  weights.head(nd).setConstant(ld / static_cast<double>(demo.size()));
  weights.tail(weights.size() - nd).setConstant(ls / static_cast<double>(samp.size()));
  return sac_update(sac, b, rewards, weights, state.agent_rng).critic;
}

inline void require_buffers(const TrainState& state, bool need_samples) {
  if (state.demo().empty()) throw PreconditionError("demonstration buffer is empty");
  if (need_samples && state.samp().empty()) throw PreconditionError("sample buffer is empty");
}

}  // namespace detail

/// One optimizer step on the mean behavioral-cloning loss of an m-sized
/// demo minibatch. Never touches the sample buffer.
inline StepStats bc_train_step(TrainState& state, std::size_t m) {
  detail::require_buffers(state, false);
  const auto batch = sample_minibatch(state.demo(), m, state.sample_rng);
  StepStats stats;
  if (auto* q = std::get_if<DiscreteAgent>(&state.agent)) {
    LossAndGrad lg = bc_loss(*q, batch);
    lg.grad.scale(1.0 / static_cast<double>(m));
    nn::adam_step(q->q.params, lg.grad, q->adam, q->lr);
    stats.agent_loss = lg.loss / static_cast<double>(m);
  } else {
    auto& sac = std::get<SacAgent>(state.agent);
    LossAndGrad lg = bc_actor_loss(sac, batch);
    nn::adam_step(sac.actor.params, lg.grad, sac.actor_adam, sac.actor_lr);
    stats.agent_loss = lg.loss;
  }
  return stats;
}

/// SQIL: constant reward 1 on demonstrations and 0 on samples.
inline StepStats sqil_train_step(TrainState& state, std::size_t m) {
  detail::require_buffers(state, true);
  const auto demo = sample_minibatch(state.demo(), m, state.sample_rng);
  const auto samp = sample_minibatch(state.samp(), m, state.sample_rng);
  const std::vector<double> rd(m, 1.0);
  const std::vector<double> rs(m, 0.0);
  if (state.reward_probe) state.reward_probe({demo, samp, rd, rs, nullptr});
  StepStats stats;
  stats.agent_loss = detail::agent_update(state, demo, samp, rd, rs);
  stats.demo_reward_mean = 1.0;
  stats.samp_reward_mean = 0.0;
  return stats;
}

/// DSQIL: draw M_demo and M_samp, step the discriminator on its own
/// minibatches (after warm-up), then reward M_demo with D/2 + 1/(2 lambda_demo)
/// and M_samp with D/2 using the updated discriminator. The bonus is added
/// once, inside dsqil_rewards.
inline StepStats dsqil_train_step(TrainState& state, std::size_t m) {
  detail::require_buffers(state, true);
  const auto demo = sample_minibatch(state.demo(), m, state.sample_rng);
  const auto samp = sample_minibatch(state.samp(), m, state.sample_rng);
  StepStats stats;
  DiscriminatorModel& disc = *state.discriminator;
  if (state.samp().size() >= 1) {
    const std::size_t db = disc.batch_size();
    const auto disc_demo = sample_minibatch(state.demo(), db, state.disc_rng);
    const auto disc_samp = sample_minibatch(state.samp(), db, state.disc_rng);
    const DiscUpdateResult r = disc_update(disc, disc_demo, disc_samp, state.samp().size());
    stats.disc_updated = r.status == UpdateStatus::Updated;
    stats.disc_loss = r.loss;
  }
  const auto rd = dsqil_rewards(disc, demo, Source::Demo, state.config.lambda_demo);
  const auto rs = dsqil_rewards(disc, samp, Source::Sample, state.config.lambda_demo);
  if (state.reward_probe) state.reward_probe({demo, samp, rd, rs, &disc});
  stats.agent_loss = detail::agent_update(state, demo, samp, rd, rs);
  stats.demo_reward_mean = detail::mean_of(rd);
  stats.samp_reward_mean = detail::mean_of(rs);
  return stats;
}

inline StepStats train_step(TrainState& state) {
  switch (state.config.algorithm) {
    case Algorithm::BC: return bc_train_step(state, state.config.batch_size);
    case Algorithm::SQIL: return sqil_train_step(state, state.config.batch_size);
    case Algorithm::DSQIL: return dsqil_train_step(state, state.config.batch_size);
  }
  return {};
}

/// Action used while collecting samples: a Boltzmann draw for discrete
/// agents, a reparameterized squashed-Gaussian draw for SAC.
inline ActionValue exploration_action(TrainState& state, const Observation& obs) {
  if (auto* q = std::get_if<DiscreteAgent>(&state.agent)) {
    return ActionValue::discrete(q->sample_action(obs, state.policy_rng));
  }
  return ActionValue::continuous(sample_action(std::get<SacAgent>(state.agent), obs, state.policy_rng).action);
}

/// Deterministic action for evaluation: greedy Q or tanh(mean).
inline ActionValue greedy_action(const Agent& agent, const Observation& obs) {
  if (const auto* q = std::get_if<DiscreteAgent>(&agent)) return ActionValue::discrete(q->greedy_action(obs));
  return ActionValue::continuous(mean_action(std::get<SacAgent>(agent), obs));
}

struct EpochStats {
  int env_steps = 0;
  int updates = 0;
  double agent_loss = 0.0;
  double disc_loss = 0.0;
  int disc_updates = 0;
  double demo_reward_mean = 0.0;
  double samp_reward_mean = 0.0;
};

namespace detail {

struct StatsAccumulator {
  EpochStats out;
  double demo_reward_sum = 0.0;
  double samp_reward_sum = 0.0;
  double loss_sum = 0.0;
  double disc_loss_sum = 0.0;

  void add(const StepStats& s) {
    ++out.updates;
    loss_sum += s.agent_loss;
    demo_reward_sum += s.demo_reward_mean;
    samp_reward_sum += s.samp_reward_mean;
    if (s.disc_updated) {
      ++out.disc_updates;
      disc_loss_sum += s.disc_loss;
    }
  }

  EpochStats finish() {
    if (out.updates > 0) {
      const double n = out.updates;
      out.agent_loss = loss_sum / n;
      out.demo_reward_mean = demo_reward_sum / n;
      out.samp_reward_mean = samp_reward_sum / n;
    }
    if (out.disc_updates > 0) out.disc_loss = disc_loss_sum / out.disc_updates;
    return out;
  }
};

inline int mean_demo_length(const ReplayBuffer& demo) {
  const auto trajectories = count_trajectories(demo);
  if (trajectories == 0) return 1;
  return static_cast<int>((demo.size() + trajectories - 1) / trajectories);
}

}  // namespace detail

/// One episode of interaction with the current policy. Every transition is
/// pushed into the sample buffer as it occurs; training happens after each
/// step (updates_per_episode == 0) or as a block after the episode.
inline EpochStats dsqil_episode_loop(TrainState& state, Environment& env) {
  if (state.config.algorithm == Algorithm::BC) throw PreconditionError("BC does not interact with the environment");
  detail::StatsAccumulator acc;
  Observation obs = env.reset(state.config.train_start);
  const int trajectory = static_cast<int>(state.episode);
  while (true) {
    const ActionValue action = exploration_action(state, obs);
    const StepResult r = env.step(action);
    ++acc.out.env_steps;
    state.push_sample({obs, action, r.next_obs, r.done, Source::Sample, trajectory});
    if (state.config.updates_per_episode == 0) acc.add(train_step(state));
    obs = r.next_obs;
    if (r.done || r.truncated) break;
  }
  for (int i = 0; i < state.config.updates_per_episode; ++i) acc.add(train_step(state));
  ++state.episode;
  return acc.finish();
}

/// One epoch: an episode plus its updates, or for BC a block of updates on
/// the demonstrations only (the environment is not touched).
inline EpochStats run_epoch(TrainState& state, Environment& env) {
  if (state.config.algorithm != Algorithm::BC) return dsqil_episode_loop(state, env);
  detail::StatsAccumulator acc;
  const int updates = state.config.updates_per_episode > 0 ? state.config.updates_per_episode
                                                           : detail::mean_demo_length(state.demo());
  for (int i = 0; i < updates; ++i) acc.add(bc_train_step(state, state.config.batch_size));
  ++state.episode;
  return acc.finish();
}

// ---- gradient identity oracle ----------------------------------------------

enum class GradientConvention {
  Residual,      // differentiate through the bootstrap value V(s')
  SemiGradient,  // bootstrap value held constant
};

struct RbcGradients {
  /// Gradient of sum_demo -(Q - V) + lambda_demo * sum_demo (Q - R - gamma V')^2
  ///                + lambda_samp * mean_samp (Q - R - gamma V')^2.
  nn::Gradient direct;
  /// Gradient of lambda_demo * sum_demo (Q - (R + 1/(2 lambda_demo)) - gamma V')^2
  ///                + lambda_samp * mean_samp (...)^2 + sum_trajectories V(s0).
  nn::Gradient telescoped;
  /// The squared terms of `telescoped` plus sum_t (V(s_t) - gamma V(s'_t)),
  /// the bootstrap part differentiated only under the residual convention.
  nn::Gradient unrolled;
  double direct_loss = 0.0;
  double telescoped_loss = 0.0;
  /// Per demo trajectory: sum_t (V(s_t) - V(s_{t+1})) with V(s_T) = 0, and V(s_0).
  std::vector<double> telescoping_sums;
  std::vector<double> initial_values;
  /// Regression targets R + 1/(2 lambda_demo) + gamma V' for each demo transition.
  std::vector<double> demo_targets;
};

/// Computes the DSQIL objective gradient two ways on the full buffers, for
/// gamma = 1 demonstrations that share their first state and end absorbed.
/// Uses the online network for every value (no target network).
inline RbcGradients rbc_gradient_oracle(const DiscreteAgent& agent, const ReplayBuffer& demo,
                                        const ReplayBuffer& samp, std::span<const double> demo_rewards,
                                        std::span<const double> samp_rewards, double lambda_demo,
                                        double lambda_samp, GradientConvention convention) {
  if (agent.gamma != 1.0) throw PreconditionError("rbc_gradient_oracle: requires gamma == 1");
  if (demo.empty() || samp.empty()) throw PreconditionError("rbc_gradient_oracle: empty buffer");
  if (demo_rewards.size() != demo.size() || samp_rewards.size() != samp.size()) {
    throw DimensionError("rbc_gradient_oracle: reward length mismatch");
  }
  if (!(lambda_demo > 0.0)) throw PreconditionError("rbc_gradient_oracle: lambda_demo must be > 0");

  // Trajectory structure: [begin, end) ranges over the demo buffer.
  std::vector<std::pair<std::size_t, std::size_t>> trajectories;
  for (std::size_t i = 0; i < demo.size(); ++i) {
    if (i == 0 || demo[i].trajectory != demo[i - 1].trajectory) trajectories.push_back({i, i});
    trajectories.back().second = i + 1;
  }
  const Observation& s0 = demo[trajectories.front().first].state;
  for (const auto& [begin, end] : trajectories) {
    if (demo[begin].state != s0) throw PreconditionError("rbc_gradient_oracle: trajectories start from different states");
    if (!demo[end - 1].done) throw PreconditionError("rbc_gradient_oracle: trajectory does not end absorbed");
    for (std::size_t i = begin; i + 1 < end; ++i) {
      if (demo[i].done) throw PreconditionError("rbc_gradient_oracle: absorbed before trajectory end");
      if (demo[i].next_state != demo[i + 1].state) throw PreconditionError("rbc_gradient_oracle: broken trajectory");
    }
  }

  const auto& spec = agent.q.spec;
  const auto& params = agent.q.params;
  const double gamma = agent.gamma;
  const bool residual = convention == GradientConvention::Residual;
  const double bonus = 1.0 / (2.0 * lambda_demo);

  const std::vector<Transition> demo_vec(demo.begin(), demo.end());
  const std::vector<Transition> samp_vec(samp.begin(), samp.end());
  const BatchMatrices db = BatchMatrices::from(demo_vec);
  const BatchMatrices sb = BatchMatrices::from(samp_vec);
  const nn::Tape demo_tape = nn::forward_tape(spec, params, db.states);
  const nn::Tape demo_next_tape = nn::forward_tape(spec, params, db.next_states);
  const nn::Tape samp_tape = nn::forward_tape(spec, params, sb.states);
  const nn::Tape samp_next_tape = nn::forward_tape(spec, params, sb.next_states);
  const Eigen::MatrixXd& qd = demo_tape.output();
  const Eigen::MatrixXd& qd_next = demo_next_tape.output();
  const Eigen::MatrixXd& qs = samp_tape.output();
  const Eigen::MatrixXd& qs_next = samp_next_tape.output();

  auto masked_values = [](const Eigen::MatrixXd& q, const Eigen::VectorXd& not_done) {
    Eigen::VectorXd v(q.cols());
    for (Eigen::Index i = 0; i < q.cols(); ++i) v[i] = not_done[i] == 0.0 ? 0.0 : soft_value(q.col(i));
    return v;
  };
  const Eigen::VectorXd vd = soft_values(qd);
  const Eigen::VectorXd vd_next = masked_values(qd_next, db.not_done);
  const Eigen::VectorXd vs_next = masked_values(qs_next, sb.not_done);
  const Eigen::MatrixXd pd = softmax_columns(qd);
  const Eigen::MatrixXd pd_next = softmax_columns(qd_next);
  const Eigen::MatrixXd ps_next = softmax_columns(qs_next);

  const auto nd = qd.cols();
  const auto ns = qs.cols();
  const double samp_scale = 1.0 / static_cast<double>(ns);

  // Sample-buffer squared error: identical in both forms.
  auto samp_term = [&](Eigen::MatrixXd& g_s, Eigen::MatrixXd& g_s_next) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < ns; ++i) {
      const int a = sb.actions[static_cast<std::size_t>(i)];
      const double e = qs(a, i) - (samp_rewards[static_cast<std::size_t>(i)] + gamma * vs_next[i]);
      loss += lambda_samp * samp_scale * e * e;
      g_s(a, i) += 2.0 * lambda_samp * samp_scale * e;
      if (residual && sb.not_done[i] != 0.0) g_s_next.col(i) -= 2.0 * lambda_samp * samp_scale * e * gamma * ps_next.col(i);
    }
    return loss;
  };

  auto assemble = [&](const Eigen::MatrixXd& g_d, const Eigen::MatrixXd& g_d_next, const Eigen::MatrixXd& g_s,
                      const Eigen::MatrixXd& g_s_next) {
    nn::Gradient g = nn::backward_tape(spec, params, demo_tape, g_d).grad;
    g.axpy(1.0, nn::backward_tape(spec, params, demo_next_tape, g_d_next).grad);
    g.axpy(1.0, nn::backward_tape(spec, params, samp_tape, g_s).grad);
    g.axpy(1.0, nn::backward_tape(spec, params, samp_next_tape, g_s_next).grad);
    return g;
  };

  RbcGradients out;

  // Route 1: behavioral cloning plus squared soft Bellman error, as defined.
  {
    Eigen::MatrixXd g_d = Eigen::MatrixXd::Zero(qd.rows(), nd), g_d_next = g_d;
    Eigen::MatrixXd g_s = Eigen::MatrixXd::Zero(qs.rows(), ns), g_s_next = g_s;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < nd; ++i) {
      const int a = db.actions[static_cast<std::size_t>(i)];
      loss -= qd(a, i) - vd[i];
      g_d.col(i) += pd.col(i);
      g_d(a, i) -= 1.0;
      const double e = qd(a, i) - (demo_rewards[static_cast<std::size_t>(i)] + gamma * vd_next[i]);
      loss += lambda_demo * e * e;
      g_d(a, i) += 2.0 * lambda_demo * e;
      if (residual && db.not_done[i] != 0.0) g_d_next.col(i) -= 2.0 * lambda_demo * e * gamma * pd_next.col(i);
    }
    loss += samp_term(g_s, g_s_next);
    out.direct = assemble(g_d, g_d_next, g_s, g_s_next);
    out.direct_loss = loss;
  }

  // Route 2: completed square, demo reward shifted by 1/(2 lambda_demo).
  Eigen::MatrixXd sq_d = Eigen::MatrixXd::Zero(qd.rows(), nd), sq_d_next = sq_d;
  Eigen::MatrixXd sq_s = Eigen::MatrixXd::Zero(qs.rows(), ns), sq_s_next = sq_s;
  double sq_loss = 0.0;
  for (Eigen::Index i = 0; i < nd; ++i) {
    const int a = db.actions[static_cast<std::size_t>(i)];
    const double target = demo_rewards[static_cast<std::size_t>(i)] + bonus + gamma * vd_next[i];
    out.demo_targets.push_back(target);
    const double e = qd(a, i) - target;
    sq_loss += lambda_demo * e * e;
    sq_d(a, i) += 2.0 * lambda_demo * e;
    if (residual && db.not_done[i] != 0.0) sq_d_next.col(i) -= 2.0 * lambda_demo * e * gamma * pd_next.col(i);
  }
  sq_loss += samp_term(sq_s, sq_s_next);

  {
    // + sum over trajectories of V(s0): every trajectory starts at s0.
    const nn::Tape s0_tape = nn::forward_tape(spec, params, s0);
    const Eigen::VectorXd p0 = boltzmann_policy(s0_tape.output().col(0));
    const double count = static_cast<double>(trajectories.size());
    out.telescoped = assemble(sq_d, sq_d_next, sq_s, sq_s_next);
    out.telescoped.axpy(count, nn::backward_tape(spec, params, s0_tape, p0).grad);
    out.telescoped_loss = sq_loss + count * soft_value(s0_tape.output().col(0));
  }
  {
    Eigen::MatrixXd g_d = sq_d + pd;
    Eigen::MatrixXd g_d_next = sq_d_next;
    if (residual) {
      for (Eigen::Index i = 0; i < nd; ++i) {
        if (db.not_done[i] != 0.0) g_d_next.col(i) -= gamma * pd_next.col(i);
      }
    }
    out.unrolled = assemble(g_d, g_d_next, sq_s, sq_s_next);
  }

  for (const auto& [begin, end] : trajectories) {
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      sum += vd[col] - vd_next[col];
    }
    out.telescoping_sums.push_back(sum);
    out.initial_values.push_back(vd[static_cast<Eigen::Index>(begin)]);
  }
  return out;
}

}  // namespace dsqil
