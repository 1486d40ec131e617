#pragma once

// Discrete maximum-entropy Q-learning with temperature 1:
//   pi(a|s) = exp(Q(s,a) - V(s)),  V(s) = log sum_a exp Q(s,a).

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/nn.hpp"
#include "dsqil/replay.hpp"
#include "dsqil/rng.hpp"

namespace dsqil {

using QValues = Eigen::VectorXd;

namespace detail {

inline void require_finite(const QValues& q, const char* op) {
  if (q.size() < 1) throw PreconditionError(std::string(op) + ": need at least one action");
  if (!q.allFinite()) throw NonFiniteError(std::string(op) + ": non-finite Q value");
}

}  // namespace detail

/// Max-shifted log-sum-exp.
inline double soft_value(const QValues& q) {
  detail::require_finite(q, "soft_value");
  const double m = q.maxCoeff();
  return m + std::log((q.array() - m).exp().sum());
}

inline Eigen::VectorXd log_boltzmann_policy(const QValues& q) {
  return q.array() - soft_value(q);
}

inline Eigen::VectorXd boltzmann_policy(const QValues& q) {
  detail::require_finite(q, "boltzmann_policy");
  const Eigen::ArrayXd e = (q.array() - q.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

/// Column-wise soft values of a |A| x B matrix.
inline Eigen::VectorXd soft_values(const Eigen::MatrixXd& q) {
  Eigen::VectorXd v(q.cols());
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    const double m = q.col(j).maxCoeff();
    v[j] = m + std::log((q.col(j).array() - m).exp().sum());
  }
  return v;
}

/// Column-wise softmax of a |A| x B matrix.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& q) {
  Eigen::MatrixXd p(q.rows(), q.cols());
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    const Eigen::ArrayXd e = (q.col(j).array() - q.col(j).maxCoeff()).exp();
    p.col(j) = (e / e.sum()).matrix();
  }
  return p;
}

struct DiscreteAgentConfig {
  int hidden_layers = 3;
  int hidden_width = 256;
  double lr = 3e-4;
  double gamma = 0.99;
  double polyak = 5e-3;
};

/// Q-network, its Polyak target and optimizer state.
struct DiscreteAgent {
  nn::Mlp q;
  nn::MlpParams target;
  nn::AdamState adam;
  double gamma = 0.99;
  double lr = 3e-4;
  double polyak = 5e-3;

  static DiscreteAgent create(const EnvSpec& env, const DiscreteAgentConfig& cfg, Rng& rng) {
    if (env.action_kind != ActionKind::Discrete) throw PreconditionError("DiscreteAgent needs a discrete env");
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw PreconditionError("gamma must lie in [0, 1]");
    nn::Mlp net = nn::Mlp::create(nn::MlpSpec::make(env.obs_dim, cfg.hidden_layers, cfg.hidden_width,
                                                    env.action_dim, nn::Activation::ReLU,
                                                    nn::Activation::Identity),
                                  rng);
    DiscreteAgent agent{net, net.params, nn::AdamState::for_params(net.params), cfg.gamma, cfg.lr, cfg.polyak};
    return agent;
  }

  int num_actions() const { return q.spec.output_dim(); }

  QValues q_values(const Observation& obs) const { return nn::forward(q.spec, q.params, obs); }

  int greedy_action(const Observation& obs) const {
    Eigen::Index best;
    q_values(obs).maxCoeff(&best);
    return static_cast<int>(best);
  }

  /// Draws from the Boltzmann policy by inverse CDF.
  int sample_action(const Observation& obs, Rng& rng) const {
    const Eigen::VectorXd p = boltzmann_policy(q_values(obs));
    double u = rng.uniform();
    for (Eigen::Index a = 0; a + 1 < p.size(); ++a) {
      u -= p[a];
      if (u < 0.0) return static_cast<int>(a);
    }
    return static_cast<int>(p.size() - 1);
  }
};

struct LossAndGrad {
  double loss = 0.0;
  nn::Gradient grad;
};

/// Column-stacked view of a batch of transitions.
struct BatchMatrices {
  Eigen::MatrixXd states;
  Eigen::MatrixXd next_states;
  std::vector<int> actions;
  Eigen::VectorXd not_done;  // 0 for transitions into the absorbing state

  static BatchMatrices from(std::span<const Transition> batch) {
    if (batch.empty()) throw PreconditionError("empty batch");
    const auto n = static_cast<Eigen::Index>(batch.size());
    const Eigen::Index dim = batch.front().state.size();
    BatchMatrices b{Eigen::MatrixXd(dim, n), Eigen::MatrixXd(dim, n), {}, Eigen::VectorXd(n)};
    b.actions.reserve(batch.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const Transition& t = batch[static_cast<std::size_t>(i)];
      if (t.state.size() != dim || t.next_state.size() != dim) throw DimensionError("ragged batch");
      b.states.col(i) = t.state;
      b.next_states.col(i) = t.next_state;
      b.actions.push_back(t.action.index());
      b.not_done[i] = t.done ? 0.0 : 1.0;
    }
    return b;
  }
};

/// Negative log Boltzmann likelihood of the demonstrated actions, summed
/// over the batch: sum -(Q(s,a) - V(s)).
inline LossAndGrad bc_loss(const DiscreteAgent& agent, std::span<const Transition> demo) {
  if (demo.empty()) throw PreconditionError("bc_loss: empty batch");
  for (const auto& t : demo) {
    if (t.source != Source::Demo) throw PreconditionError("bc_loss: batch contains sample transitions");
  }
  const BatchMatrices b = BatchMatrices::from(demo);
  const nn::Tape tape = nn::forward_tape(agent.q.spec, agent.q.params, b.states);
  const Eigen::MatrixXd& q = tape.output();
  const Eigen::VectorXd v = soft_values(q);
  Eigen::MatrixXd dq = softmax_columns(q);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    const int a = b.actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= q.rows()) throw DimensionError("bc_loss: action index out of range");
    loss -= q(a, i) - v[i];
    dq(a, i) -= 1.0;
  }
  return {loss, nn::backward_tape(agent.q.spec, agent.q.params, tape, dq).grad};
}

/// mean_i (Q(s_i,a_i) - (r_i + gamma * V_target(s'_i)))^2 with V_target
/// zeroed for absorbed transitions. The target is a constant: gradient flows
/// only through Q(s_i, a_i).
inline LossAndGrad soft_bellman_error(const DiscreteAgent& agent, std::span<const Transition> batch,
                                      std::span<const double> rewards) {
  if (batch.empty()) throw PreconditionError("soft_bellman_error: empty batch");
  if (rewards.size() != batch.size()) throw DimensionError("soft_bellman_error: rewards/batch length mismatch");
  const BatchMatrices b = BatchMatrices::from(batch);
  const Eigen::VectorXd next_v = soft_values(nn::forward_batch(agent.q.spec, agent.target, b.next_states));
  const nn::Tape tape = nn::forward_tape(agent.q.spec, agent.q.params, b.states);
  const Eigen::MatrixXd& q = tape.output();
  const double scale = 1.0 / static_cast<double>(batch.size());
  Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(q.rows(), q.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    const int a = b.actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= q.rows()) throw DimensionError("soft_bellman_error: action index out of range");
    const double y = rewards[static_cast<std::size_t>(i)] + agent.gamma * b.not_done[i] * next_v[i];
    const double err = q(a, i) - y;
    loss += err * err;
    dq(a, i) = 2.0 * err * scale;
  }
  return {loss * scale, nn::backward_tape(agent.q.spec, agent.q.params, tape, dq).grad};
}

}  // namespace dsqil
