#pragma once

// Built-in MDPs with absorbing terminal states:
//   GridWorld  N x N, four moves, reward 1 on entering the goal corner.
//   PointMass  1-D or 2-D double integrator, bounded action, reward
//              exp(-|pos|^2) per step, time-limited (never absorbing).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dsqil/errors.hpp"
#include "dsqil/rng.hpp"

namespace dsqil {

using Observation = Eigen::VectorXd;

enum class ActionKind { Discrete, Continuous };
enum class StartMode { Fixed, Shifted };

inline std::string to_string(StartMode m) { return m == StartMode::Fixed ? "fixed" : "shifted"; }

inline StartMode start_mode_from_string(const std::string& s) {
  if (s == "fixed") return StartMode::Fixed;
  if (s == "shifted") return StartMode::Shifted;
  throw PreconditionError("unknown start mode '" + s + "'");
}

/// Discrete(index) or Continuous(vector in [-1, 1]^d).
class ActionValue {
 public:
  static ActionValue discrete(int index) { return ActionValue(index); }
  static ActionValue continuous(Eigen::VectorXd v) { return ActionValue(std::move(v)); }

  bool is_discrete() const { return std::holds_alternative<int>(value_); }
  int index() const { return std::get<int>(value_); }
  const Eigen::VectorXd& vector() const { return std::get<Eigen::VectorXd>(value_); }

  bool operator==(const ActionValue& other) const {
    if (is_discrete() != other.is_discrete()) return false;
    return is_discrete() ? index() == other.index() : vector() == other.vector();
  }

 private:
  explicit ActionValue(int index) : value_(index) {}
  explicit ActionValue(Eigen::VectorXd v) : value_(std::move(v)) {}
  std::variant<int, Eigen::VectorXd> value_;
};

struct EnvSpec {
  std::string name;  // "gridworld" or "pointmass"
  int obs_dim = 0;
  ActionKind action_kind = ActionKind::Discrete;
  int action_dim = 0;  // |A| for discrete, vector length for continuous
  int max_steps = 1;
  int size = 0;  // gridworld side length (0 otherwise)
  double return_discount = 1.0;

  /// Width of the action part of a discriminator input.
  int action_encoding_dim() const { return action_dim; }

  nlohmann::json to_json() const {
    return {{"name", name},
            {"obs_dim", obs_dim},
            {"action_kind", action_kind == ActionKind::Discrete ? "discrete" : "continuous"},
            {"action_dim", action_dim},
            {"max_steps", max_steps},
            {"size", size},
            {"return_discount", return_discount}};
  }

  static EnvSpec from_json(const nlohmann::json& j) {
    EnvSpec s;
    s.name = j.at("name").get<std::string>();
    s.obs_dim = j.at("obs_dim").get<int>();
    const auto kind = j.at("action_kind").get<std::string>();
    if (kind != "discrete" && kind != "continuous") throw PreconditionError("bad action_kind " + kind);
    s.action_kind = kind == "discrete" ? ActionKind::Discrete : ActionKind::Continuous;
    s.action_dim = j.at("action_dim").get<int>();
    s.max_steps = j.at("max_steps").get<int>();
    s.size = j.value("size", 0);
    s.return_discount = j.value("return_discount", 1.0);
    if (s.max_steps < 1 || s.obs_dim < 1 || s.action_dim < 1) throw PreconditionError("invalid env spec");
    return s;
  }

  bool operator==(const EnvSpec&) const = default;
};

/// One-hot for discrete actions, the raw vector for continuous ones.
inline Eigen::VectorXd encode_action(const ActionValue& a, const EnvSpec& spec) {
  if (spec.action_kind == ActionKind::Discrete) {
    if (!a.is_discrete() || a.index() < 0 || a.index() >= spec.action_dim) {
      throw DimensionError("encode_action: invalid discrete action");
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(spec.action_dim);
    v[a.index()] = 1.0;
    return v;
  }
  if (a.is_discrete() || a.vector().size() != spec.action_dim) {
    throw DimensionError("encode_action: invalid continuous action");
  }
  return a.vector();
}

struct StepResult {
  Observation next_obs;
  double env_reward = 0.0;  // evaluation only
  bool done = false;        // reached the absorbing state
  bool truncated = false;   // hit the time limit without absorbing
};

using Policy = std::function<ActionValue(const Observation&)>;

class Environment {
 public:
  virtual ~Environment() = default;

  virtual const EnvSpec& spec() const = 0;
  virtual Observation reset(StartMode mode) = 0;
  virtual StepResult step(const ActionValue& action) = 0;
  virtual Observation absorbing_observation() const = 0;
  /// Declared start states for `mode`.
  virtual std::vector<Observation> start_states(StartMode mode) const = 0;

  /// Total number of step() calls over the lifetime of this instance.
  std::int64_t step_count() const { return step_count_; }

 protected:
  std::int64_t step_count_ = 0;
};

// ---- GridWorld ------------------------------------------------------------

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

class GridWorld final : public Environment {
 public:
  enum Move : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
  static constexpr int kNumActions = 4;

  GridWorld(int size, int max_steps, std::uint64_t seed, double discount = 0.99)
      : rng_(seed) {
    if (size < 2) throw PreconditionError("gridworld size must be >= 2");
    if (max_steps < 1) throw PreconditionError("max_steps must be >= 1");
    spec_.name = "gridworld";
    spec_.size = size;
    spec_.obs_dim = 2 + size * size;
    spec_.action_kind = ActionKind::Discrete;
    spec_.action_dim = kNumActions;
    spec_.max_steps = max_steps;
    spec_.return_discount = discount;
  }

  int size() const { return spec_.size; }
  Cell start_cell() const { return {0, 0}; }
  Cell goal_cell() const { return {size() - 1, size() - 1}; }
  bool is_goal(Cell c) const { return c == goal_cell(); }
  int num_cells() const { return size() * size(); }
  int cell_index(Cell c) const { return c.row * size() + c.col; }
  Cell cell_at(int index) const { return {index / size(), index % size()}; }

  /// Deterministic move; bumping into the boundary leaves the agent in place.
  Cell transition(Cell c, int action) const {
    if (action < 0 || action >= kNumActions) throw DimensionError("gridworld: invalid action index");
    Cell next = c;
    switch (action) {
      case kUp: next.row -= 1; break;
      case kDown: next.row += 1; break;
      case kLeft: next.col -= 1; break;
      case kRight: next.col += 1; break;
    }
    if (next.row < 0 || next.row >= size() || next.col < 0 || next.col >= size()) return c;
    return next;
  }

  /// Normalized (row, col) followed by a one-hot over cells.
  Observation encode(Cell c) const {
    Observation obs = Observation::Zero(spec_.obs_dim);
    const double scale = 1.0 / static_cast<double>(size() - 1);
    obs[0] = c.row * scale;
    obs[1] = c.col * scale;
    obs[2 + cell_index(c)] = 1.0;
    return obs;
  }

  /// Inverse of encode; fails on the absorbing observation.
  Cell decode(const Observation& obs) const {
    if (obs.size() != spec_.obs_dim) throw DimensionError("gridworld: observation size mismatch");
    for (int i = 0; i < num_cells(); ++i) {
      if (obs[2 + i] == 1.0) return cell_at(i);
    }
    throw PreconditionError("gridworld: observation does not encode a cell");
  }

  /// Off-demonstration starts: the upper-right block (rows < N/2, cols >= N/2).
  std::vector<Cell> shifted_start_cells() const {
    std::vector<Cell> cells;
    for (int r = 0; r < size() / 2; ++r) {
      for (int c = size() / 2; c < size(); ++c) {
        if (!is_goal({r, c}) && !(Cell{r, c} == start_cell())) cells.push_back({r, c});
      }
    }
    return cells;
  }

  const EnvSpec& spec() const override { return spec_; }

  Observation reset(StartMode mode) override {
    if (mode == StartMode::Fixed) {
      cell_ = start_cell();
    } else {
      const auto cells = shifted_start_cells();
      cell_ = cells[rng_.index(cells.size())];
    }
    absorbed_ = false;
    elapsed_ = 0;
    started_ = true;
    return encode(cell_);
  }

  StepResult step(const ActionValue& action) override {
    if (!action.is_discrete()) throw DimensionError("gridworld: expected a discrete action");
    if (!started_) throw PreconditionError("gridworld: step before reset");
    ++step_count_;
    const int a = action.index();
    if (a < 0 || a >= kNumActions) throw DimensionError("gridworld: invalid action index");
    if (absorbed_) return {absorbing_observation(), 0.0, true, false};
    if (elapsed_ >= spec_.max_steps) throw PreconditionError("gridworld: episode truncated; reset required");
    ++elapsed_;
    cell_ = transition(cell_, a);
    if (is_goal(cell_)) {
      absorbed_ = true;
      return {absorbing_observation(), 1.0, true, false};
    }
    return {encode(cell_), 0.0, false, elapsed_ >= spec_.max_steps};
  }

  Observation absorbing_observation() const override { return Observation::Zero(spec_.obs_dim); }

  std::vector<Observation> start_states(StartMode mode) const override {
    if (mode == StartMode::Fixed) return {encode(start_cell())};
    std::vector<Observation> out;
    for (Cell c : shifted_start_cells()) out.push_back(encode(c));
    return out;
  }

 private:
  EnvSpec spec_;
  Rng rng_;
  Cell cell_;
  bool absorbed_ = false;
  bool started_ = false;
  int elapsed_ = 0;
};

struct ValueIterationResult {
  std::vector<double> values;        // per cell; 0 at the goal (absorbed)
  std::vector<int> greedy_action;    // per cell
  int iterations = 0;
  double residual = 0.0;
};

/// Exact solution of the gridworld: Q(s,a) = r(s,a) + gamma * V(s') with
/// V(goal) = 0. Ties in the greedy policy go to the lowest action index.
inline ValueIterationResult value_iteration(const GridWorld& env, double gamma, double tolerance = 1e-10,
                                            int max_iterations = 100000) {
  const int n = env.num_cells();
  ValueIterationResult result;
  result.values.assign(static_cast<std::size_t>(n), 0.0);
  auto q_value = [&](int s, int a, const std::vector<double>& v) {
    const Cell next = env.transition(env.cell_at(s), a);
    if (env.is_goal(next)) return 1.0;
    return gamma * v[static_cast<std::size_t>(env.cell_index(next))];
  };
  for (int it = 1; it <= max_iterations; ++it) {
    std::vector<double> next(result.values.size(), 0.0);
    double residual = 0.0;
    for (int s = 0; s < n; ++s) {
      if (env.is_goal(env.cell_at(s))) continue;
      double best = -1.0;
      for (int a = 0; a < GridWorld::kNumActions; ++a) best = std::max(best, q_value(s, a, result.values));
      next[static_cast<std::size_t>(s)] = best;
      residual = std::max(residual, std::abs(best - result.values[static_cast<std::size_t>(s)]));
    }
    result.values = std::move(next);
    result.iterations = it;
    result.residual = residual;
    if (residual < tolerance) {
      result.greedy_action.assign(static_cast<std::size_t>(n), 0);
      for (int s = 0; s < n; ++s) {
        int best_a = 0;
        double best = q_value(s, 0, result.values);
        for (int a = 1; a < GridWorld::kNumActions; ++a) {
          const double q = q_value(s, a, result.values);
          if (q > best + 1e-12) {
            best = q;
            best_a = a;
          }
        }
        result.greedy_action[static_cast<std::size_t>(s)] = best_a;
      }
      return result;
    }
  }
  throw PreconditionError("value iteration did not converge within " + std::to_string(max_iterations) +
                          " iterations (residual " + std::to_string(result.residual) + ")");
}

/// Greedy value-iteration policy as a callable over observations.
inline Policy gridworld_expert_policy(const GridWorld& env, const ValueIterationResult& solution) {
  const GridWorld geometry = env;
  return [geometry, actions = solution.greedy_action](const Observation& obs) {
    const Cell c = geometry.decode(obs);
    return ActionValue::discrete(actions[static_cast<std::size_t>(geometry.cell_index(c))]);
  };
}

// ---- PointMass ------------------------------------------------------------

class PointMass final : public Environment {
 public:
  static constexpr double kDt = 0.1;
  static constexpr double kMaxSpeed = 2.0;
  static constexpr double kBound = 3.0;

  PointMass(int dim, int max_steps, std::uint64_t seed, double discount = 1.0) : rng_(seed) {
    if (dim != 1 && dim != 2) throw PreconditionError("pointmass dim must be 1 or 2");
    if (max_steps < 1) throw PreconditionError("max_steps must be >= 1");
    spec_.name = "pointmass";
    spec_.obs_dim = 2 * dim;
    spec_.action_kind = ActionKind::Continuous;
    spec_.action_dim = dim;
    spec_.max_steps = max_steps;
    spec_.return_discount = discount;
  }

  int dim() const { return spec_.action_dim; }

  Observation fixed_start() const {
    Observation s = Observation::Zero(spec_.obs_dim);
    s.head(dim()).setConstant(-1.0);
    return s;
  }

  /// Starts on the opposite side of the goal from the demonstrations.
  std::vector<Observation> shifted_starts() const {
    std::vector<Observation> out;
    const std::vector<std::vector<double>> positions =
        dim() == 1 ? std::vector<std::vector<double>>{{1.0}, {1.5}}
                   : std::vector<std::vector<double>>{{1.0, 1.0}, {1.0, -1.0}, {-1.0, 1.0}};
    for (const auto& p : positions) {
      Observation s = Observation::Zero(spec_.obs_dim);
      for (int i = 0; i < dim(); ++i) s[i] = p[static_cast<std::size_t>(i)];
      out.push_back(s);
    }
    return out;
  }

  const EnvSpec& spec() const override { return spec_; }

  Observation reset(StartMode mode) override {
    if (mode == StartMode::Fixed) {
      state_ = fixed_start();
    } else {
      const auto starts = shifted_starts();
      state_ = starts[rng_.index(starts.size())];
    }
    elapsed_ = 0;
    started_ = true;
    return state_;
  }

  StepResult step(const ActionValue& action) override {
    if (action.is_discrete() || action.vector().size() != dim()) {
      throw DimensionError("pointmass: expected a " + std::to_string(dim()) + "-d continuous action");
    }
    if (!started_) throw PreconditionError("pointmass: step before reset");
    if (elapsed_ >= spec_.max_steps) throw PreconditionError("pointmass: episode truncated; reset required");
    ++step_count_;
    ++elapsed_;
    const Eigen::VectorXd a = action.vector().cwiseMax(-1.0).cwiseMin(1.0);
    for (int i = 0; i < dim(); ++i) {
      double vel = std::clamp(state_[dim() + i] + kDt * a[i], -kMaxSpeed, kMaxSpeed);
      double pos = state_[i] + kDt * vel;
      if (pos < -kBound || pos > kBound) {
        pos = std::clamp(pos, -kBound, kBound);
        vel = 0.0;
      }
      state_[i] = pos;
      state_[dim() + i] = vel;
    }
    const double reward = std::exp(-state_.head(dim()).squaredNorm());
    return {state_, reward, false, elapsed_ >= spec_.max_steps};
  }

  Observation absorbing_observation() const override { return Observation::Zero(spec_.obs_dim); }

  std::vector<Observation> start_states(StartMode mode) const override {
    if (mode == StartMode::Fixed) return {fixed_start()};
    return shifted_starts();
  }

 private:
  EnvSpec spec_;
  Rng rng_;
  Observation state_;
  int elapsed_ = 0;
  bool started_ = false;
};

struct EnvConfig {
  std::string name = "gridworld";
  int size = 5;
  int dim = 1;
  int max_steps = 50;
  double discount = 0.99;  // used for evaluation returns and value iteration
};

inline std::unique_ptr<Environment> make_environment(const EnvConfig& cfg, std::uint64_t seed) {
  if (cfg.name == "gridworld") return std::make_unique<GridWorld>(cfg.size, cfg.max_steps, seed, cfg.discount);
  if (cfg.name == "pointmass") return std::make_unique<PointMass>(cfg.dim, cfg.max_steps, seed, cfg.discount);
  throw PreconditionError("unknown environment '" + cfg.name + "'");
}

struct EpisodeReturn {
  double discounted_return = 0.0;
  int length = 0;
  bool absorbed = false;
};

/// Runs one episode of `policy` and reports the discounted return.
inline EpisodeReturn rollout_return(Environment& env, const Policy& policy, StartMode mode) {
  Observation obs = env.reset(mode);
  EpisodeReturn out;
  double discount = 1.0;
  const double gamma = env.spec().return_discount;
  while (true) {
    const StepResult r = env.step(policy(obs));
    out.discounted_return += discount * r.env_reward;
    discount *= gamma;
    ++out.length;
    obs = r.next_obs;
    if (r.done) {
      out.absorbed = true;
      break;
    }
    if (r.truncated) break;
  }
  return out;
}

}  // namespace dsqil
