#pragma once

// Soft actor-critic for continuous actions: tanh-squashed Gaussian actor,
// twin critics with Polyak targets, learned temperature.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/nn.hpp"
#include "dsqil/replay.hpp"
#include "dsqil/rng.hpp"
#include "dsqil/soft_q.hpp"

namespace dsqil {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

struct SacConfig {
  int hidden_layers = 3;
  int hidden_width = 256;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double gamma = 0.99;
  double polyak = 5e-3;
  double alpha_init = 0.2;
  std::optional<double> target_entropy;  // default: -action_dim
  bool learn_alpha = true;
};

struct SacAgent {
  nn::Mlp actor;  // obs -> [mean (d), log-std (d)]
  std::array<nn::Mlp, 2> critics;  // [obs, action] -> Q
  std::array<nn::MlpParams, 2> targets;
  nn::AdamState actor_adam;
  std::array<nn::AdamState, 2> critic_adam;
  nn::ScalarAdam alpha_adam;
  double log_alpha = std::log(0.2);
  double gamma = 0.99;
  double polyak = 5e-3;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double target_entropy = -1.0;
  bool learn_alpha = true;

  static SacAgent create(const EnvSpec& env, const SacConfig& cfg, Rng& rng) {
    if (env.action_kind != ActionKind::Continuous) throw PreconditionError("SacAgent needs a continuous env");
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw PreconditionError("gamma must lie in [0, 1]");
    if (!(cfg.alpha_init > 0.0)) throw PreconditionError("alpha_init must be > 0");
    const int d = env.action_dim;
    SacAgent agent;
    agent.actor = nn::Mlp::create(nn::MlpSpec::make(env.obs_dim, cfg.hidden_layers, cfg.hidden_width, 2 * d,
                                                    nn::Activation::ReLU, nn::Activation::Identity),
                                  rng);
    for (int i = 0; i < 2; ++i) {
      agent.critics[i] = nn::Mlp::create(nn::MlpSpec::make(env.obs_dim + d, cfg.hidden_layers, cfg.hidden_width,
                                                           1, nn::Activation::ReLU, nn::Activation::Identity),
                                         rng);
      agent.targets[i] = agent.critics[i].params;
      agent.critic_adam[i] = nn::AdamState::for_params(agent.critics[i].params);
    }
    agent.actor_adam = nn::AdamState::for_params(agent.actor.params);
    agent.log_alpha = std::log(cfg.alpha_init);
    agent.gamma = cfg.gamma;
    agent.polyak = cfg.polyak;
    agent.actor_lr = cfg.actor_lr;
    agent.critic_lr = cfg.critic_lr;
    agent.alpha_lr = cfg.alpha_lr;
    agent.target_entropy = cfg.target_entropy.value_or(-static_cast<double>(d));
    agent.learn_alpha = cfg.learn_alpha;
    return agent;
  }

  int action_dim() const { return actor.spec.output_dim() / 2; }
  int obs_dim() const { return actor.spec.input_dim(); }
  double alpha() const { return std::exp(log_alpha); }
};

namespace detail {

/// log(1 - tanh(u)^2), stable for large |u|.
inline double log1m_tanh_sq(double u) {
  const double x = -2.0 * u;
  const double softplus = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return 2.0 * (std::numbers::ln2 - u - softplus);
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace detail

/// Batched tanh-Gaussian policy evaluated at fixed standard-normal noise.
struct PolicySample {
  nn::Tape tape;             // actor forward pass
  Eigen::MatrixXd log_std;   // clamped, d x B
  Eigen::MatrixXd noise;     // d x B
  Eigen::MatrixXd pre_squash;
  Eigen::MatrixXd actions;   // tanh(pre_squash)
  Eigen::VectorXd log_prob;  // B
};

inline PolicySample policy_sample(const SacAgent& agent, const Eigen::MatrixXd& states, const Eigen::MatrixXd& noise) {
  const int d = agent.action_dim();
  if (noise.rows() != d || noise.cols() != states.cols()) throw DimensionError("policy_sample: noise shape");
  PolicySample s{nn::forward_tape(agent.actor.spec, agent.actor.params, states), {}, noise, {}, {}, {}};
  const Eigen::MatrixXd& out = s.tape.output();
  s.log_std = out.bottomRows(d).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  s.pre_squash = out.topRows(d).array() + s.log_std.array().exp() * noise.array();
  s.actions = s.pre_squash.array().tanh();
  s.log_prob.resize(states.cols());
  for (Eigen::Index b = 0; b < states.cols(); ++b) {
    double lp = 0.0;
    for (int j = 0; j < d; ++j) {
      lp += -0.5 * noise(j, b) * noise(j, b) - s.log_std(j, b) - detail::kHalfLog2Pi -
            detail::log1m_tanh_sq(s.pre_squash(j, b));
    }
    s.log_prob[b] = lp;
  }
  return s;
}

inline Eigen::MatrixXd standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd z(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) z(r, c) = rng.normal();
  }
  return z;
}

struct SquashedAction {
  Eigen::VectorXd pre_squash;
  Eigen::VectorXd action;
  double log_prob = 0.0;
};

/// Reparameterized draw a = tanh(mean + std * z).
inline SquashedAction sample_action(const SacAgent& agent, const Observation& obs, Rng& rng) {
  if (obs.size() != agent.obs_dim()) throw DimensionError("sample_action: observation size mismatch");
  const PolicySample s = policy_sample(agent, obs, standard_normal(rng, agent.action_dim(), 1));
  return {s.pre_squash.col(0), s.actions.col(0), s.log_prob[0]};
}

/// Deterministic evaluation action tanh(mean).
inline Eigen::VectorXd mean_action(const SacAgent& agent, const Observation& obs) {
  if (obs.size() != agent.obs_dim()) throw DimensionError("mean_action: observation size mismatch");
  return nn::forward(agent.actor.spec, agent.actor.params, obs).head(agent.action_dim()).array().tanh();
}

/// log pi(a|s) of an action strictly inside (-1, 1).
inline double log_prob(const SacAgent& agent, const Observation& obs, const Eigen::VectorXd& action) {
  const int d = agent.action_dim();
  if (action.size() != d) throw DimensionError("log_prob: action size mismatch");
  const Eigen::VectorXd out = nn::forward(agent.actor.spec, agent.actor.params, obs);
  double lp = 0.0;
  for (int j = 0; j < d; ++j) {
    const double a = action[j];
    if (!(a > -1.0 && a < 1.0)) throw PreconditionError("log_prob: action outside (-1, 1)");
    const double u = std::atanh(a);
    const double log_std = std::clamp(out[d + j], kLogStdMin, kLogStdMax);
    const double z = (u - out[j]) / std::exp(log_std);
    lp += -0.5 * z * z - log_std - detail::kHalfLog2Pi - detail::log1m_tanh_sq(u);
  }
  return lp;
}

/// Column-stacked continuous batch.
struct ContinuousBatch {
  Eigen::MatrixXd states;
  Eigen::MatrixXd actions;
  Eigen::MatrixXd next_states;
  Eigen::VectorXd not_done;

  static ContinuousBatch from(std::span<const Transition> batch) {
    if (batch.empty()) throw PreconditionError("empty batch");
    const auto n = static_cast<Eigen::Index>(batch.size());
    const Eigen::Index sdim = batch.front().state.size();
    const Eigen::Index adim = batch.front().action.vector().size();
    ContinuousBatch b{Eigen::MatrixXd(sdim, n), Eigen::MatrixXd(adim, n), Eigen::MatrixXd(sdim, n),
                      Eigen::VectorXd(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
      const Transition& t = batch[static_cast<std::size_t>(i)];
      if (t.action.is_discrete() || t.action.vector().size() != adim || t.state.size() != sdim ||
          t.next_state.size() != sdim) {
        throw DimensionError("ragged continuous batch");
      }
      b.states.col(i) = t.state;
      b.actions.col(i) = t.action.vector();
      b.next_states.col(i) = t.next_state;
      b.not_done[i] = t.done ? 0.0 : 1.0;
    }
    return b;
  }
};

inline Eigen::MatrixXd stack_rows(const Eigen::MatrixXd& top, const Eigen::MatrixXd& bottom) {
  Eigen::MatrixXd m(top.rows() + bottom.rows(), top.cols());
  m << top, bottom;
  return m;
}

/// y = r + gamma * (min_i Q_target_i(s', a') - alpha * log pi(a'|s')), with
/// a' drawn from `next_noise` and the bootstrap term dropped for absorbed
/// transitions.
inline Eigen::VectorXd critic_targets(const SacAgent& agent, const ContinuousBatch& b,
                                      std::span<const double> rewards, const Eigen::MatrixXd& next_noise) {
  if (rewards.size() != static_cast<std::size_t>(b.states.cols())) {
    throw DimensionError("critic_targets: rewards/batch length mismatch");
  }
  const PolicySample next = policy_sample(agent, b.next_states, next_noise);
  const Eigen::MatrixXd inputs = stack_rows(b.next_states, next.actions);
  const Eigen::MatrixXd q1 = nn::forward_batch(agent.critics[0].spec, agent.targets[0], inputs);
  const Eigen::MatrixXd q2 = nn::forward_batch(agent.critics[1].spec, agent.targets[1], inputs);
  Eigen::VectorXd y(b.states.cols());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double soft_next = std::min(q1(0, i), q2(0, i)) - agent.alpha() * next.log_prob[i];
    y[i] = rewards[static_cast<std::size_t>(i)] + agent.gamma * b.not_done[i] * soft_next;
  }
  return y;
}

/// sum_i w_i (Q_k(s_i, a_i) - y_i)^2 for critic k, targets held constant.
inline LossAndGrad critic_loss(const SacAgent& agent, int k, const ContinuousBatch& b, const Eigen::VectorXd& targets,
                               const Eigen::VectorXd& weights) {
  const auto& critic = agent.critics[static_cast<std::size_t>(k)];
  const nn::Tape tape = nn::forward_tape(critic.spec, critic.params, stack_rows(b.states, b.actions));
  const Eigen::RowVectorXd err = tape.output().row(0) - targets.transpose();
  const Eigen::MatrixXd grad_out = 2.0 * err.cwiseProduct(weights.transpose());
  const double loss = err.cwiseProduct(err).cwiseProduct(weights.transpose()).sum();
  return {loss, nn::backward_tape(critic.spec, critic.params, tape, grad_out).grad};
}

inline Eigen::VectorXd uniform_weights(Eigen::Index n) {
  return Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
}

struct ActorLoss {
  double loss = 0.0;
  nn::Gradient grad;
  Eigen::VectorXd log_prob;
};

/// sum_b w_b (alpha * log pi(a_b|s_b) - min_k Q_k(s_b, a_b)) with
/// a_b = tanh(mean + std * noise_b); alpha and the critics are constants.
inline ActorLoss actor_loss(const SacAgent& agent, const Eigen::MatrixXd& states, const Eigen::MatrixXd& noise,
                            const Eigen::VectorXd& weights) {
  const int d = agent.action_dim();
  const Eigen::Index n = states.cols();
  const PolicySample s = policy_sample(agent, states, noise);
  const Eigen::MatrixXd inputs = stack_rows(states, s.actions);
  std::array<nn::Tape, 2> tapes{nn::forward_tape(agent.critics[0].spec, agent.critics[0].params, inputs),
                                nn::forward_tape(agent.critics[1].spec, agent.critics[1].params, inputs)};
  const double alpha = agent.alpha();
  std::array<Eigen::MatrixXd, 2> critic_grad{Eigen::MatrixXd::Zero(1, n), Eigen::MatrixXd::Zero(1, n)};
  double loss = 0.0;
  for (Eigen::Index b = 0; b < n; ++b) {
    const double q1 = tapes[0].output()(0, b);
    const double q2 = tapes[1].output()(0, b);
    const int k = q1 <= q2 ? 0 : 1;
    loss += weights[b] * (alpha * s.log_prob[b] - std::min(q1, q2));
    critic_grad[static_cast<std::size_t>(k)](0, b) = -weights[b];
  }
  // dLoss/d(action) through the selected critic per sample.
  Eigen::MatrixXd grad_action = Eigen::MatrixXd::Zero(d, n);
  for (int k = 0; k < 2; ++k) {
    const auto& critic = agent.critics[static_cast<std::size_t>(k)];
    const nn::BackwardResult r = nn::backward_tape(critic.spec, critic.params, tapes[static_cast<std::size_t>(k)],
                                                   critic_grad[static_cast<std::size_t>(k)]);
    grad_action += r.input_grad.bottomRows(d);
  }
  const Eigen::MatrixXd& raw = s.tape.output();
  Eigen::MatrixXd grad_out(2 * d, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    for (int j = 0; j < d; ++j) {
      const double a = s.actions(j, b);
      const double sigma_z = std::exp(s.log_std(j, b)) * s.noise(j, b);
      const double grad_u = grad_action(j, b) * (1.0 - a * a);
      grad_out(j, b) = grad_u + weights[b] * alpha * 2.0 * a;
      const double grad_log_std = grad_u * sigma_z + weights[b] * alpha * (-1.0 + 2.0 * a * sigma_z);
      const double r = raw(d + j, b);
      grad_out(d + j, b) = (r >= kLogStdMin && r <= kLogStdMax) ? grad_log_std : 0.0;
    }
  }
  return {loss, nn::backward_tape(agent.actor.spec, agent.actor.params, s.tape, grad_out).grad, s.log_prob};
}

/// d/d(log alpha) of -log alpha * mean(log pi + target_entropy).
inline double alpha_gradient(const SacAgent& agent, const Eigen::VectorXd& log_probs) {
  return -(log_probs.array() + agent.target_entropy).mean();
}

struct SacLosses {
  double critic = 0.0;
  double actor = 0.0;
  double alpha = 0.0;
};

/// One Adam step per critic on the weighted squared soft Bellman error.
inline double critic_update(SacAgent& agent, const ContinuousBatch& b, std::span<const double> rewards,
                            const Eigen::VectorXd& weights, Rng& rng) {
  const Eigen::VectorXd y = critic_targets(agent, b, rewards, standard_normal(rng, agent.action_dim(), b.states.cols()));
  double total = 0.0;
  for (int k = 0; k < 2; ++k) {
    LossAndGrad lg = critic_loss(agent, k, b, y, weights);
    nn::adam_step(agent.critics[static_cast<std::size_t>(k)].params, lg.grad,
                  agent.critic_adam[static_cast<std::size_t>(k)], agent.critic_lr);
    total += lg.loss;
  }
  return total / 2.0;
}

inline double critic_update(SacAgent& agent, std::span<const Transition> batch, std::span<const double> rewards,
                            Rng& rng) {
  const ContinuousBatch b = ContinuousBatch::from(batch);
  return critic_update(agent, b, rewards, uniform_weights(b.states.cols()), rng);
}

/// One Adam step on the actor; returns the loss and the log-probs of the
/// sampled actions (reused by the temperature update).
inline ActorLoss actor_update(SacAgent& agent, const Eigen::MatrixXd& states, Rng& rng) {
  ActorLoss al = actor_loss(agent, states, standard_normal(rng, agent.action_dim(), states.cols()),
                            uniform_weights(states.cols()));
  nn::adam_step(agent.actor.params, al.grad, agent.actor_adam, agent.actor_lr);
  return al;
}

inline ActorLoss actor_update(SacAgent& agent, std::span<const Transition> batch, Rng& rng) {
  return actor_update(agent, ContinuousBatch::from(batch).states, rng);
}

/// One Adam step on log alpha. Returns the loss value.
inline double alpha_update_from_log_probs(SacAgent& agent, const Eigen::VectorXd& log_probs) {
  const double mean_term = (log_probs.array() + agent.target_entropy).mean();
  if (agent.learn_alpha) agent.alpha_adam.apply(agent.log_alpha, alpha_gradient(agent, log_probs), agent.alpha_lr);
  return -agent.log_alpha * mean_term;
}

inline double alpha_update(SacAgent& agent, std::span<const Transition> batch, Rng& rng) {
  const Eigen::MatrixXd states = ContinuousBatch::from(batch).states;
  const PolicySample s = policy_sample(agent, states, standard_normal(rng, agent.action_dim(), states.cols()));
  return alpha_update_from_log_probs(agent, s.log_prob);
}

inline void update_targets(SacAgent& agent) {
  for (std::size_t k = 0; k < 2; ++k) nn::polyak_update(agent.targets[k], agent.critics[k].params, agent.polyak);
}

/// Critic, actor, temperature and target updates on one weighted batch.
/// The actor and temperature see the batch states with uniform weights.
inline SacLosses sac_update(SacAgent& agent, const ContinuousBatch& b, std::span<const double> rewards,
                            const Eigen::VectorXd& critic_weights, Rng& rng) {
  SacLosses losses;
  losses.critic = critic_update(agent, b, rewards, critic_weights, rng);
  const ActorLoss al = actor_update(agent, b.states, rng);
  losses.actor = al.loss;
  losses.alpha = alpha_update_from_log_probs(agent, al.log_prob);
  update_targets(agent);
  return losses;
}

/// -mean log pi(a_demo|s_demo) for continuous behavioral cloning.
inline LossAndGrad bc_actor_loss(const SacAgent& agent, std::span<const Transition> demo) {
  if (demo.empty()) throw PreconditionError("bc_actor_loss: empty batch");
  const ContinuousBatch b = ContinuousBatch::from(demo);
  const int d = agent.action_dim();
  const Eigen::Index n = b.states.cols();
  const nn::Tape tape = nn::forward_tape(agent.actor.spec, agent.actor.params, b.states);
  const Eigen::MatrixXd& out = tape.output();
  const double w = 1.0 / static_cast<double>(n);
  constexpr double kEdge = 1.0 - 1e-6;
  Eigen::MatrixXd grad_out(2 * d, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const double u = std::atanh(std::clamp(b.actions(j, i), -kEdge, kEdge));
      const double raw = out(d + j, i);
      const double log_std = std::clamp(raw, kLogStdMin, kLogStdMax);
      const double z = (u - out(j, i)) / std::exp(log_std);
      loss -= w * (-0.5 * z * z - log_std - detail::kHalfLog2Pi - detail::log1m_tanh_sq(u));
      grad_out(j, i) = -w * z / std::exp(log_std);
      grad_out(d + j, i) = (raw >= kLogStdMin && raw <= kLogStdMax) ? -w * (z * z - 1.0) : 0.0;
    }
  }
  return {loss, nn::backward_tape(agent.actor.spec, agent.actor.params, tape, grad_out).grad};
}

}  // namespace dsqil
