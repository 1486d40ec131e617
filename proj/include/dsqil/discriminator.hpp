#pragma once

#include <cmath>
#include <memory>
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

/// Lower clamp on log arguments in the discriminator loss.
inline constexpr double kLogClamp = 1e-12;

/// State encoding followed by the action encoding.
inline Eigen::VectorXd encode_pair(const Transition& t, const EnvSpec& spec) {
  if (t.state.size() != spec.obs_dim) throw DimensionError("encode_pair: state size mismatch");
  Eigen::VectorXd v(spec.obs_dim + spec.action_encoding_dim());
  v << t.state, encode_action(t.action, spec);
  return v;
}

inline Eigen::MatrixXd encode_pairs(std::span<const Transition> batch, const EnvSpec& spec) {
  Eigen::MatrixXd m(spec.obs_dim + spec.action_encoding_dim(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = encode_pair(batch[i], spec);
  return m;
}

enum class UpdateStatus { Updated, Skipped };

struct DiscUpdateResult {
  UpdateStatus status = UpdateStatus::Skipped;
  double loss = 0.0;  // loss on the training batch before the step
};

/// What the DSQIL loop needs from a discriminator.
class DiscriminatorModel {
 public:
  virtual ~DiscriminatorModel() = default;
  /// D(s, a) for each transition, in (0, 1).
  virtual Eigen::VectorXd evaluate(std::span<const Transition> batch) const = 0;
  /// One training step unless `samp_buffer_size` is below the warm-up threshold.
  virtual DiscUpdateResult train(std::span<const Transition> demo, std::span<const Transition> samp,
                                 std::size_t samp_buffer_size) = 0;
  virtual std::size_t batch_size() const = 0;
  virtual std::unique_ptr<DiscriminatorModel> clone() const = 0;
};

struct DiscriminatorConfig {
  int hidden_layers = 3;
  int hidden_width = 128;
  double lr = 3e-4;
  std::size_t batch_size = 512;
  std::size_t warmup = 1024;
};

/// Tanh MLP with a sigmoid head trained with binary cross entropy.
class Discriminator final : public DiscriminatorModel {
 public:
  Discriminator(EnvSpec env, const DiscriminatorConfig& cfg, Rng& rng)
      : env_(std::move(env)),
        cfg_(cfg),
        net_(nn::Mlp::create(nn::MlpSpec::make(env_.obs_dim + env_.action_encoding_dim(), cfg.hidden_layers,
                                               cfg.hidden_width, 1, nn::Activation::Tanh, nn::Activation::Sigmoid),
                             rng)),
        adam_(nn::AdamState::for_params(net_.params)) {}

  const EnvSpec& env() const { return env_; }
  const DiscriminatorConfig& config() const { return cfg_; }
  nn::Mlp& network() { return net_; }
  const nn::Mlp& network() const { return net_; }
  nn::AdamState& adam() { return adam_; }

  double forward(const Eigen::VectorXd& pair) const {
    if (pair.size() != net_.spec.input_dim()) throw DimensionError("disc_forward: encoding length mismatch");
    return nn::forward(net_.spec, net_.params, pair)[0];
  }

  Eigen::VectorXd evaluate(std::span<const Transition> batch) const override {
    if (batch.empty()) return {};
    return nn::forward_batch(net_.spec, net_.params, encode_pairs(batch, env_)).row(0).transpose();
  }

  DiscUpdateResult train(std::span<const Transition> demo, std::span<const Transition> samp,
                         std::size_t samp_buffer_size) override;

  std::size_t batch_size() const override { return cfg_.batch_size; }

  std::unique_ptr<DiscriminatorModel> clone() const override { return std::make_unique<Discriminator>(*this); }

 private:
  EnvSpec env_;
  DiscriminatorConfig cfg_;
  nn::Mlp net_;
  nn::AdamState adam_;
};

inline double disc_forward(const Discriminator& d, const Eigen::VectorXd& pair) { return d.forward(pair); }

/// -mean_demo log D - mean_samp log(1 - D), log arguments clamped at 1e-12.
/// The gradient is that of the clamped loss (zero where the clamp binds).
inline LossAndGrad disc_loss(const Discriminator& d, std::span<const Transition> demo,
                             std::span<const Transition> samp) {
  if (demo.empty() || samp.empty()) throw PreconditionError("disc_loss: empty batch");
  const auto& net = d.network();
  const auto nd = static_cast<Eigen::Index>(demo.size());
  const auto ns = static_cast<Eigen::Index>(samp.size());
  Eigen::MatrixXd inputs(net.spec.input_dim(), nd + ns);
  inputs.leftCols(nd) = encode_pairs(demo, d.env());
  inputs.rightCols(ns) = encode_pairs(samp, d.env());
  const nn::Tape tape = nn::forward_tape(net.spec, net.params, inputs);
  const Eigen::MatrixXd& out = tape.output();
  Eigen::MatrixXd grad_out(1, nd + ns);
  double demo_term = 0.0;
  for (Eigen::Index i = 0; i < nd; ++i) {
    const double p = out(0, i);
    demo_term += std::log(std::max(p, kLogClamp));
    grad_out(0, i) = p > kLogClamp ? -1.0 / (static_cast<double>(nd) * p) : 0.0;
  }
  double samp_term = 0.0;
  for (Eigen::Index i = 0; i < ns; ++i) {
    const double q = 1.0 - out(0, nd + i);
    samp_term += std::log(std::max(q, kLogClamp));
    grad_out(0, nd + i) = q > kLogClamp ? 1.0 / (static_cast<double>(ns) * q) : 0.0;
  }
  const double loss = -demo_term / static_cast<double>(nd) - samp_term / static_cast<double>(ns);
  return {loss, nn::backward_tape(net.spec, net.params, tape, grad_out).grad};
}

inline DiscUpdateResult Discriminator::train(std::span<const Transition> demo, std::span<const Transition> samp,
                                             std::size_t samp_buffer_size) {
  if (samp_buffer_size < cfg_.warmup) return {UpdateStatus::Skipped, 0.0};
  LossAndGrad lg = disc_loss(*this, demo, samp);
  nn::adam_step(net_.params, lg.grad, adam_, cfg_.lr);
  return {UpdateStatus::Updated, lg.loss};
}

/// One Adam step on disc_loss, or Skipped while the sample buffer holds
/// fewer than the warm-up count.
inline DiscUpdateResult disc_update(DiscriminatorModel& d, std::span<const Transition> demo,
                                    std::span<const Transition> samp, std::size_t samp_buffer_size) {
  return d.train(demo, samp, samp_buffer_size);
}

/// Scores 1 for demo-tagged and 0 for sample-tagged transitions. With these
/// scores DSQIL's rewards collapse to SQIL's constants.
class SourceStubDiscriminator final : public DiscriminatorModel {
 public:
  Eigen::VectorXd evaluate(std::span<const Transition> batch) const override {
    Eigen::VectorXd d(static_cast<Eigen::Index>(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      d[static_cast<Eigen::Index>(i)] = batch[i].source == Source::Demo ? 1.0 : 0.0;
    }
    return d;
  }
  DiscUpdateResult train(std::span<const Transition>, std::span<const Transition>, std::size_t) override {
    return {UpdateStatus::Skipped, 0.0};
  }
  std::size_t batch_size() const override { return 1; }
  std::unique_ptr<DiscriminatorModel> clone() const override {
    return std::make_unique<SourceStubDiscriminator>(*this);
  }
};

/// Demo: D/2 + 1/(2 lambda_demo). Sample: D/2.
///
/// Sample rewards are formed as (D/2 + c) - c, which equals D/2 up to one
/// rounding and makes the demo/sample gap for a pair exactly c whenever
/// lambda_demo <= 1.
inline std::vector<double> dsqil_rewards(const DiscriminatorModel& d, std::span<const Transition> batch,
                                         Source source, double lambda_demo) {
  if (!(lambda_demo > 0.0)) throw PreconditionError("dsqil_rewards: lambda_demo must be > 0");
  const double bonus = 1.0 / (2.0 * lambda_demo);
  const Eigen::VectorXd scores = d.evaluate(batch);
  std::vector<double> rewards(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double demo_reward = scores[static_cast<Eigen::Index>(i)] / 2.0 + bonus;
    rewards[i] = source == Source::Demo ? demo_reward : demo_reward - bonus;
  }
  return rewards;
}

}  // namespace dsqil
