#pragma once

// Experiment orchestration: expert construction and demonstration sweeps,
// training runs with per-epoch metrics, evaluation, and comparison reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsqil/config.hpp"
#include "dsqil/discriminator.hpp"
#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/imitation.hpp"
#include "dsqil/nn.hpp"
#include "dsqil/replay.hpp"
#include "dsqil/sac.hpp"
#include "dsqil/soft_q.hpp"

namespace dsqil {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "1.0.0";

// ---- checkpoints ------------------------------------------------------------

inline json agent_to_json(const Agent& agent, const EnvSpec& env) {
  if (const auto* q = std::get_if<DiscreteAgent>(&agent)) {
    return {{"kind", "discrete"},
            {"env", env.to_json()},
            {"gamma", q->gamma},
            {"q", nn::to_json(q->q)},
            {"q_target", nn::to_json({q->q.spec, q->target})}};
  }
  const auto& sac = std::get<SacAgent>(agent);
  return {{"kind", "sac"},
          {"env", env.to_json()},
          {"gamma", sac.gamma},
          {"log_alpha", sac.log_alpha},
          {"actor", nn::to_json(sac.actor)},
          {"critic1", nn::to_json(sac.critics[0])},
          {"critic2", nn::to_json(sac.critics[1])},
          {"target1", nn::to_json({sac.critics[0].spec, sac.targets[0]})},
          {"target2", nn::to_json({sac.critics[1].spec, sac.targets[1]})}};
}

inline json tabular_to_json(const GridWorld& env, const ValueIterationResult& vi) {
  return {{"kind", "tabular"}, {"env", env.spec().to_json()}, {"greedy_action", vi.greedy_action}, {"values", vi.values}};
}

/// A frozen policy restored from a checkpoint file.
struct LoadedPolicy {
  EnvSpec env;
  std::string kind;
  Policy act;  // deterministic evaluation action
};

inline LoadedPolicy load_policy(const fs::path& path) {
  const json doc = nn::read_json_file(path);
  try {
    LoadedPolicy out{EnvSpec::from_json(doc.at("env")), doc.at("kind").get<std::string>(), {}};
    if (out.kind == "tabular") {
      if (out.env.name != "gridworld") throw PreconditionError("tabular checkpoint needs a gridworld");
      const GridWorld geometry(out.env.size, out.env.max_steps, 0, out.env.return_discount);
      ValueIterationResult vi;
      vi.greedy_action = doc.at("greedy_action").get<std::vector<int>>();
      vi.values = doc.at("values").get<std::vector<double>>();
      if (static_cast<int>(vi.greedy_action.size()) != geometry.num_cells()) {
        throw DimensionError("tabular checkpoint: cell count mismatch");
      }
      out.act = gridworld_expert_policy(geometry, vi);
    } else if (out.kind == "discrete") {
      DiscreteAgent q;
      q.q = nn::mlp_from_json(doc.at("q"));
      q.target = nn::mlp_from_json(doc.at("q_target")).params;
      q.gamma = doc.at("gamma").get<double>();
      if (q.q.spec.input_dim() != out.env.obs_dim || q.q.spec.output_dim() != out.env.action_dim) {
        throw DimensionError("discrete checkpoint does not match its env spec");
      }
      out.act = [q](const Observation& obs) { return ActionValue::discrete(q.greedy_action(obs)); };
    } else if (out.kind == "sac") {
      SacAgent sac;
      sac.actor = nn::mlp_from_json(doc.at("actor"));
      sac.critics[0] = nn::mlp_from_json(doc.at("critic1"));
      sac.critics[1] = nn::mlp_from_json(doc.at("critic2"));
      sac.targets[0] = nn::mlp_from_json(doc.at("target1")).params;
      sac.targets[1] = nn::mlp_from_json(doc.at("target2")).params;
      sac.log_alpha = doc.at("log_alpha").get<double>();
      sac.gamma = doc.at("gamma").get<double>();
      if (sac.obs_dim() != out.env.obs_dim || sac.action_dim() != out.env.action_dim) {
        throw DimensionError("sac checkpoint does not match its env spec");
      }
      out.act = [sac](const Observation& obs) { return ActionValue::continuous(mean_action(sac, obs)); };
    } else {
      throw ParseError(0, "unknown checkpoint kind '" + out.kind + "'");
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
}

// ---- evaluation ---------------------------------------------------------------

struct EvalResult {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::vector<double> returns;
};

/// Runs `episodes` deterministic episodes of `policy` on `env` and reports
/// the mean and standard deviation of the discounted returns.
inline EvalResult evaluate(const Policy& policy, Environment& env, int episodes, StartMode mode) {
  if (episodes < 1) throw PreconditionError("evaluate: episodes must be >= 1");
  EvalResult r;
  for (int i = 0; i < episodes; ++i) r.returns.push_back(rollout_return(env, policy, mode).discounted_return);
  double sum = 0.0;
  for (double x : r.returns) sum += x;
  r.mean = sum / episodes;
  if (std::all_of(r.returns.begin(), r.returns.end(), [&](double x) { return x == r.returns.front(); })) {
    r.mean = r.returns.front();  // exact for deterministic policies
    return r;
  }
  double sq = 0.0;
  for (double x : r.returns) sq += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(sq / episodes);
  return r;
}

inline EvalResult evaluate_checkpoint(const fs::path& checkpoint, const EnvConfig& env_cfg, int episodes,
                                      StartMode mode, std::uint64_t seed) {
  if (episodes < 1) throw PreconditionError("evaluate: episodes must be >= 1");
  const LoadedPolicy policy = load_policy(checkpoint);
  auto env = make_environment(env_cfg, seed);
  if (env->spec() != policy.env) throw DimensionError("checkpoint env spec does not match the configured env");
  return evaluate(policy.act, *env, episodes, mode);
}

// ---- metrics ------------------------------------------------------------------

struct MetricsRecord {
  int epoch = 0;
  double eval_return_mean = 0.0;
  double eval_return_std = 0.0;
  double demo_reward_mean = 0.0;
  double samp_reward_mean = 0.0;
  double disc_loss = 0.0;
  double agent_loss = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,eval_return_mean,eval_return_std,demo_reward_mean,samp_reward_mean,disc_loss,agent_loss,seconds";

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const fs::path& path, const std::vector<MetricsRecord>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PreconditionError("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& m : rows) {
    out << m.epoch << ',' << format_double(m.eval_return_mean) << ',' << format_double(m.eval_return_std) << ','
        << format_double(m.demo_reward_mean) << ',' << format_double(m.samp_reward_mean) << ','
        << format_double(m.disc_loss) << ',' << format_double(m.agent_loss) << ',' << format_double(m.seconds)
        << '\n';
  }
}

inline std::vector<MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw ParseError(0, path.string() + ": bad metrics header");
  std::vector<MetricsRecord> rows;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ParseError(record, path.string() + ": bad number '" + cell + "'");
      }
    }
    if (v.size() != 8) throw ParseError(record, path.string() + ": expected 8 columns");
    rows.push_back({static_cast<int>(v[0]), v[1], v[2], v[3], v[4], v[5], v[6], v[7]});
    ++record;
  }
  return rows;
}

inline void write_manifest(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg) {
  nn::write_json_file(dir / "manifest.json",
                      {{"command", command}, {"version", kVersion}, {"seed", cfg.seed}, {"config", cfg.resolved_json()}});
}

// ---- expert generation ------------------------------------------------------------

/// The expert could not reach its configured return.
class ExpertError : public std::runtime_error {
 public:
  ExpertError(double achieved, double threshold)
      : std::runtime_error("expert reached mean return " + format_double(achieved) + ", below threshold " +
                           format_double(threshold)),
        achieved_(achieved) {}
  double achieved() const { return achieved_; }

 private:
  double achieved_;
};

struct ExpertOutput {
  fs::path checkpoint;
  std::vector<fs::path> datasets;  // one per sweep entry, ascending
  EvalResult expert_return;
};

namespace detail {

/// Replay with stored environment rewards, used only to train the SAC expert.
struct RewardReplay {
  std::vector<Transition> transitions;
  std::vector<double> rewards;
};

inline SacAgent train_sac_expert(const ExperimentConfig& cfg, Environment& env, Environment& eval_env, Rng& rng,
                                 EvalResult& achieved) {
  const ExpertConfig& ec = cfg.expert;
  Rng init_rng = rng.split();
  SacAgent agent = SacAgent::create(env.spec(), ec.sac, init_rng);
  RewardReplay replay;
  const int d = env.spec().action_dim;
  int total_steps = 0;
  const Policy greedy = [&agent](const Observation& o) { return ActionValue::continuous(mean_action(agent, o)); };
  for (int episode = 1; episode <= ec.max_episodes; ++episode) {
    Observation obs = env.reset(StartMode::Fixed);
    while (true) {
      Eigen::VectorXd action(d);
      if (total_steps < ec.warmup_steps) {
        for (int j = 0; j < d; ++j) action[j] = rng.uniform(-1.0, 1.0);
      } else {
        action = sample_action(agent, obs, rng).action;
      }
      const StepResult r = env.step(ActionValue::continuous(action));
      replay.transitions.push_back({obs, ActionValue::continuous(action), r.next_obs, r.done, Source::Sample, episode});
      replay.rewards.push_back(r.env_reward);
      ++total_steps;
      if (total_steps >= ec.warmup_steps) {
        for (int u = 0; u < ec.updates_per_step; ++u) {
          std::vector<Transition> batch;
          std::vector<double> rewards;
          for (std::size_t i = 0; i < ec.batch_size; ++i) {
            const std::size_t k = rng.index(replay.transitions.size());
            batch.push_back(replay.transitions[k]);
            rewards.push_back(replay.rewards[k]);
          }
          const ContinuousBatch b = ContinuousBatch::from(batch);
          sac_update(agent, b, rewards, uniform_weights(b.states.cols()), rng);
        }
      }
      obs = r.next_obs;
      if (r.done || r.truncated) break;
    }
    if (episode % ec.eval_every == 0 || episode == ec.max_episodes) {
      achieved = evaluate(greedy, eval_env, ec.eval_episodes, StartMode::Fixed);
      if (achieved.mean >= ec.return_threshold) return agent;
    }
  }
  throw ExpertError(achieved.mean, ec.return_threshold);
}

}  // namespace detail

/// Builds the expert (exact value iteration on the gridworld, SAC on
/// PointMass), rolls out max(sweep) demonstrations from the fixed start and
/// writes nested prefix datasets demos_<k>.jsonl plus expert.json.
inline ExpertOutput generate_expert(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  Rng rng(cfg.seed);
  auto env = make_environment(cfg.env, rng.next_u64());
  auto eval_env = make_environment(cfg.env, rng.next_u64());
  ExpertOutput out;
  out.checkpoint = dir / "expert.json";
  Policy demo_policy;
  if (auto* grid = dynamic_cast<GridWorld*>(env.get())) {
    const ValueIterationResult vi = value_iteration(*grid, cfg.env.discount);
    demo_policy = gridworld_expert_policy(*grid, vi);
    out.expert_return = evaluate(demo_policy, *eval_env, cfg.expert.eval_episodes, StartMode::Fixed);
    if (out.expert_return.mean < cfg.expert.return_threshold) {
      throw ExpertError(out.expert_return.mean, cfg.expert.return_threshold);
    }
    nn::write_json_file(out.checkpoint, tabular_to_json(*grid, vi));
  } else {
    auto agent = std::make_shared<SacAgent>(detail::train_sac_expert(cfg, *env, *eval_env, rng, out.expert_return));
    nn::write_json_file(out.checkpoint, agent_to_json(*agent, env->spec()));
    if (cfg.expert.stochastic_demos) {
      auto demo_rng = std::make_shared<Rng>(rng.split());
      demo_policy = [agent, demo_rng](const Observation& o) {
        return ActionValue::continuous(sample_action(*agent, o, *demo_rng).action);
      };
    } else {
      demo_policy = [agent](const Observation& o) { return ActionValue::continuous(mean_action(*agent, o)); };
    }
  }

  const int largest = *std::max_element(cfg.expert.sweep.begin(), cfg.expert.sweep.end());
  ReplayBuffer all(env->spec());
  for (int traj = 0; traj < largest; ++traj) {
    Observation obs = env->reset(StartMode::Fixed);
    while (true) {
      const ActionValue action = demo_policy(obs);
      const StepResult r = env->step(action);
      all.push({obs, action, r.next_obs, r.done, Source::Demo, traj});
      obs = r.next_obs;
      if (r.done || r.truncated) break;
    }
  }
  std::vector<int> sweep = cfg.expert.sweep;
  std::sort(sweep.begin(), sweep.end());
  sweep.erase(std::unique(sweep.begin(), sweep.end()), sweep.end());
  for (int k : sweep) {
    const fs::path path = dir / ("demos_" + std::to_string(k) + ".jsonl");
    save_dataset(prefix_trajectories(all, static_cast<std::size_t>(k)), path);
    out.datasets.push_back(path);
  }
  nn::write_json_file(dir / "expert_summary.json",
                      {{"env", env->spec().to_json()},
                       {"expert_return_mean", out.expert_return.mean},
                       {"expert_return_std", out.expert_return.std},
                       {"sweep", sweep}});
  write_manifest(dir, "expert", cfg);
  return out;
}

// ---- training -----------------------------------------------------------------------

struct TrainingOutput {
  std::vector<MetricsRecord> metrics;
  EvalResult final_eval;
  fs::path metrics_csv;
  fs::path summary;
  fs::path checkpoint;
  std::int64_t env_steps = 0;
  Agent agent;
};

/// Loads the demonstrations named by the config, restricted to the first
/// demo_trajectories trajectories.
inline std::shared_ptr<const ReplayBuffer> load_demonstrations(const ExperimentConfig& cfg, const EnvSpec& expected) {
  ReplayBuffer full = load_dataset(cfg.dataset);
  if (full.spec() != expected) throw DimensionError("dataset env spec does not match the configured environment");
  for (const auto& t : full) {
    if (t.source != Source::Demo) throw PreconditionError("dataset contains non-demonstration transitions");
  }
  return std::make_shared<const ReplayBuffer>(prefix_trajectories(full, static_cast<std::size_t>(cfg.demo_trajectories)));
}

/// Creates the agent and (for DSQIL) discriminator described by the config.
inline TrainState make_train_state(const ExperimentConfig& cfg, std::shared_ptr<const ReplayBuffer> demo, Rng& rng) {
  const EnvSpec& spec = demo->spec();
  Rng init_rng = rng.split();
  Agent agent = spec.action_kind == ActionKind::Discrete
                    ? Agent(DiscreteAgent::create(spec, cfg.discrete, init_rng))
                    : Agent(SacAgent::create(spec, cfg.sac, init_rng));
  std::unique_ptr<DiscriminatorModel> disc;
  if (cfg.imitation.algorithm == Algorithm::DSQIL) {
    disc = std::make_unique<Discriminator>(spec, cfg.discriminator, init_rng);
  }
  return TrainState(cfg.imitation, std::move(agent), std::move(demo), std::move(disc), rng.next_u64());
}

/// Runs `episodes` epochs, evaluating the deterministic policy every
/// eval_every epochs (and after the last), then writes metrics.csv,
/// summary.json, checkpoint.json and manifest.json into output_dir.
/// `prepare` sees the fresh state before the first epoch (e.g. to attach a
/// reward probe).
inline TrainingOutput run_training(const ExperimentConfig& cfg,
                                   const std::function<void(TrainState&)>& prepare = {}) {
  std::vector<std::string> problems;
  if (cfg.dataset.empty()) problems.push_back("run.dataset is required for training");
  else if (!fs::exists(cfg.dataset)) problems.push_back("run.dataset " + cfg.dataset.string() + " does not exist");
  if (!problems.empty()) throw ConfigError(problems);

  Rng rng(cfg.seed);
  auto env = make_environment(cfg.env, rng.next_u64());
  auto eval_env = make_environment(cfg.env, rng.next_u64());
  auto demo = load_demonstrations(cfg, env->spec());
  TrainState state = make_train_state(cfg, demo, rng);
  if (prepare) prepare(state);

  TrainingOutput out{{}, {}, cfg.output_dir / "metrics.csv", cfg.output_dir / "summary.json",
                     cfg.output_dir / "checkpoint.json", 0, state.agent};
  const auto start = std::chrono::steady_clock::now();
  EvalResult last_eval;
  for (int epoch = 1; epoch <= cfg.episodes; ++epoch) {
    const EpochStats stats = run_epoch(state, *env);
    if (epoch % cfg.eval_every == 0 || epoch == cfg.episodes) {
      const Agent& agent = state.agent;
      last_eval = evaluate([&agent](const Observation& o) { return greedy_action(agent, o); }, *eval_env,
                           cfg.eval_episodes, cfg.eval_start);
    }
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.eval_return_mean = last_eval.mean;
    rec.eval_return_std = last_eval.std;
    rec.demo_reward_mean = stats.demo_reward_mean;
    rec.samp_reward_mean = stats.samp_reward_mean;
    rec.disc_loss = stats.disc_loss;
    rec.agent_loss = stats.agent_loss;
    if (cfg.record_timing) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    out.metrics.push_back(rec);
  }
  out.final_eval = last_eval;
  out.env_steps = env->step_count();
  out.agent = state.agent;

  fs::create_directories(cfg.output_dir);
  write_metrics_csv(out.metrics_csv, out.metrics);
  nn::write_json_file(out.checkpoint, agent_to_json(state.agent, env->spec()));
  nn::write_json_file(out.summary, {{"algorithm", to_string(cfg.imitation.algorithm)},
                                    {"env", env->spec().to_json()},
                                    {"demo_trajectories", cfg.demo_trajectories},
                                    {"seed", cfg.seed},
                                    {"episodes", cfg.episodes},
                                    {"env_steps", out.env_steps},
                                    {"final", {{"mean", last_eval.mean},
                                               {"std", last_eval.std},
                                               {"episodes", cfg.eval_episodes},
                                               {"start_mode", to_string(cfg.eval_start)}}}});
  write_manifest(cfg.output_dir, "train", cfg);
  return out;
}

// ---- reports ------------------------------------------------------------------------

struct ReportOutput {
  fs::path table_txt;
  fs::path table_csv;
  std::vector<fs::path> curves;
  std::string table;
};

/// Accepts run directories or summary.json paths.
inline ReportOutput emit_report(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  if (inputs.empty()) throw PreconditionError("emit_report: need at least one metrics input");
  struct Run {
    std::string algorithm;
    EnvSpec env;
    int trajectories;
    double mean, std;
    fs::path dir;
  };
  std::vector<Run> runs;
  for (const auto& input : inputs) {
    const fs::path summary = fs::is_directory(input) ? input / "summary.json" : input;
    const json doc = nn::read_json_file(summary);
    try {
      runs.push_back({doc.at("algorithm").get<std::string>(), EnvSpec::from_json(doc.at("env")),
                      doc.at("demo_trajectories").get<int>(), doc.at("final").at("mean").get<double>(),
                      doc.at("final").at("std").get<double>(), summary.parent_path()});
    } catch (const json::exception& e) {
      throw ParseError(0, summary.string() + ": " + e.what());
    }
  }
  std::map<std::string, EnvSpec> env_by_name;
  for (const auto& r : runs) {
    auto [it, inserted] = env_by_name.emplace(r.env.name, r.env);
    if (!inserted && it->second != r.env) throw DimensionError("emit_report: mismatched env specs for " + r.env.name);
  }

  std::vector<std::string> algorithms;
  for (const char* a : {"bc", "sqil", "dsqil"}) {
    if (std::any_of(runs.begin(), runs.end(), [&](const Run& r) { return r.algorithm == a; })) algorithms.push_back(a);
  }
  for (const auto& r : runs) {
    if (std::find(algorithms.begin(), algorithms.end(), r.algorithm) == algorithms.end()) {
      algorithms.push_back(r.algorithm);
    }
  }
  // (env, trajectories) -> algorithm -> run
  std::map<std::pair<std::string, int>, std::map<std::string, const Run*>> grid;
  for (const auto& r : runs) grid[{r.env.name, r.trajectories}][r.algorithm] = &r;

  auto short_cell = [](const Run& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g ± %.4g", r.mean, r.std);
    return std::string(buf);
  };

  std::ostringstream txt;
  std::ostringstream csv;
  txt << "| env | trajectories |";
  csv << "env,trajectories";
  for (const auto& a : algorithms) {
    txt << ' ' << a << " |";
    csv << ',' << a << "_mean," << a << "_std";
  }
  txt << "\n|---|---|";
  for (std::size_t i = 0; i < algorithms.size(); ++i) txt << "---|";
  txt << '\n';
  csv << '\n';
  for (const auto& [key, row] : grid) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& [a, run] : row) best = std::max(best, run->mean);
    txt << "| " << key.first << " | " << key.second << " |";
    csv << key.first << ',' << key.second;
    for (const auto& a : algorithms) {
      auto it = row.find(a);
      if (it == row.end()) {
        txt << " - |";
        csv << ",,";
        continue;
      }
      const bool is_best = it->second->mean == best;
      txt << ' ' << (is_best ? "**" : "") << short_cell(*it->second) << (is_best ? "**" : "") << " |";
      csv << ',' << format_double(it->second->mean) << ',' << format_double(it->second->std);
    }
    txt << '\n';
    csv << '\n';
  }

  ReportOutput out{out_dir / "report.md", out_dir / "report.csv", {}, txt.str()};
  fs::create_directories(out_dir / "curves");
  {
    std::ofstream f(out.table_txt, std::ios::binary);
    f << out.table;
    std::ofstream g(out.table_csv, std::ios::binary);
    g << csv.str();
  }
  std::map<std::string, int> used;
  for (const auto& r : runs) {
    std::string label = r.env.name + "_" + std::to_string(r.trajectories) + "_" + r.algorithm;
    const int n = used[label]++;
    if (n > 0) label += "_" + std::to_string(n);
    const fs::path metrics = r.dir / "metrics.csv";
    const fs::path curve = out_dir / "curves" / (label + ".csv");
    write_metrics_csv(curve, read_metrics_csv(metrics));
    out.curves.push_back(curve);
  }
  return out;
}

}  // namespace dsqil
