#pragma once

// Experiment configuration: an INI file ([run], [env], [agent],
// [discriminator], [expert]) layered over built-in defaults, then CLI
// overrides of the form section.key=value.

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "dsqil/discriminator.hpp"
#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/imitation.hpp"
#include "dsqil/sac.hpp"
#include "dsqil/soft_q.hpp"

namespace dsqil {

/// Every validation problem found in a configuration, reported together.
class ConfigError : public PreconditionError {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : PreconditionError(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& problems) {
    std::string s = "invalid configuration:";
    for (const auto& p : problems) s += "\n  - " + p;
    return s;
  }
  std::vector<std::string> problems_;
};

/// section -> key -> raw value
using ConfigTable = std::map<std::string, std::map<std::string, std::string>>;

/// Known keys and their defaults. Network sizes follow the published SAC and
/// discriminator tables; desk-scale runs override them.
inline const ConfigTable& default_config_table() {
  static const ConfigTable table = {
      {"run",
       {{"algorithm", "dsqil"},
        {"seed", "0"},
        {"episodes", "500"},
        {"eval_episodes", "50"},
        {"eval_every", "1"},
        {"eval_start", "fixed"},
        {"demo_trajectories", "8"},
        {"dataset", ""},
        {"output_dir", "runs/default"},
        {"record_timing", "false"}}},
      {"env",
       {{"name", "gridworld"},
        {"size", "5"},
        {"dim", "1"},
        {"max_steps", "50"},
        {"discount", "0.99"},
        {"train_start", "fixed"}}},
      {"agent",
       {{"hidden_layers", "3"},
        {"hidden_width", "256"},
        {"lr", "3e-4"},
        {"actor_lr", "3e-4"},
        {"critic_lr", "3e-4"},
        {"alpha_lr", "3e-4"},
        {"gamma", "0.99"},
        {"polyak", "5e-3"},
        {"alpha_init", "0.2"},
        {"learn_alpha", "true"},
        {"target_entropy", "auto"},
        {"batch_size", "64"},
        {"lambda_demo", "1"},
        {"lambda_samp", "1"},
        {"updates_per_episode", "0"},
        {"samp_capacity", "1000000"}}},
      {"discriminator",
       {{"hidden_layers", "3"}, {"hidden_width", "128"}, {"lr", "3e-4"}, {"batch_size", "512"}, {"warmup", "1024"}}},
      {"expert",
       {{"sweep", "2,4,8,16,32"},
        {"return_threshold", "0"},
        {"max_episodes", "400"},
        {"eval_episodes", "20"},
        {"eval_every", "10"},
        {"hidden_layers", "3"},
        {"hidden_width", "256"},
        {"batch_size", "64"},
        {"warmup_steps", "1000"},
        {"updates_per_step", "1"},
        {"stochastic_demos", "true"}}},
  };
  return table;
}

struct ExpertConfig {
  std::vector<int> sweep{2, 4, 8, 16, 32};
  double return_threshold = 0.0;
  int max_episodes = 400;
  int eval_episodes = 20;
  int eval_every = 10;
  SacConfig sac;
  std::size_t batch_size = 64;
  int warmup_steps = 1000;
  int updates_per_step = 1;
  bool stochastic_demos = true;
};

struct ExperimentConfig {
  EnvConfig env;
  ImitationConfig imitation;
  DiscreteAgentConfig discrete;
  SacConfig sac;
  DiscriminatorConfig discriminator;
  ExpertConfig expert;
  std::uint64_t seed = 0;
  int episodes = 500;
  int eval_episodes = 50;
  int eval_every = 1;
  StartMode eval_start = StartMode::Fixed;
  int demo_trajectories = 8;
  std::filesystem::path dataset;
  std::filesystem::path output_dir = "runs/default";
  bool record_timing = false;
  ConfigTable resolved;  // the table this config was built from

  nlohmann::json resolved_json() const { return nlohmann::json(resolved); }
};

namespace detail {

class FieldReader {
 public:
  explicit FieldReader(const ConfigTable& t) : table_(t) {}

  const std::string& raw(const std::string& section, const std::string& key) const {
    return table_.at(section).at(key);
  }

  template <typename T>
  T get(const std::string& section, const std::string& key) {
    const std::string& value = raw(section, key);
    std::istringstream in(value);
    T out{};
    in >> out;
    if (in.fail() || !in.eof()) {
      problems.push_back(section + "." + key + ": cannot parse '" + value + "'");
      return T{};
    }
    return out;
  }

  bool get_bool(const std::string& section, const std::string& key) {
    const std::string& value = raw(section, key);
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    problems.push_back(section + "." + key + ": expected true/false, got '" + value + "'");
    return false;
  }

  template <typename T, typename F>
  T parse_with(const std::string& section, const std::string& key, F&& parser, T fallback) {
    try {
      return parser(raw(section, key));
    } catch (const std::exception& e) {
      problems.push_back(section + "." + key + ": " + e.what());
      return fallback;
    }
  }

  void require(bool ok, const std::string& message) {
    if (!ok) problems.push_back(message);
  }

  std::vector<std::string> problems;

 private:
  const ConfigTable& table_;
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument("bad list entry");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

}  // namespace detail

/// Layers `overrides` onto `base`, rejecting unknown sections and keys.
inline void apply_entries(ConfigTable& base, const ConfigTable& overrides, std::vector<std::string>& problems) {
  const auto& known = default_config_table();
  for (const auto& [section, entries] : overrides) {
    auto sit = known.find(section);
    if (sit == known.end()) {
      problems.push_back("unknown section [" + section + "]");
      continue;
    }
    for (const auto& [key, value] : entries) {
      if (!sit->second.contains(key)) {
        problems.push_back("unknown key " + section + "." + key);
        continue;
      }
      base[section][key] = value;
    }
  }
}

inline ConfigTable read_ini_table(const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(e.line() > 0 ? e.line() - 1 : 0, path.string() + ": " + e.message());
  }
  ConfigTable table;
  for (const auto& [section, child] : tree) {
    if (child.empty()) {
      table[""][section] = child.data();
      continue;
    }
    for (const auto& [key, value] : child) table[section][key] = value.data();
  }
  return table;
}

/// Reads either an INI file or a run manifest (JSON with a "config" table).
inline ConfigTable read_config_table(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    const auto doc = nn::read_json_file(path);
    if (!doc.contains("config")) throw ParseError(0, path.string() + ": manifest has no config table");
    return doc.at("config").get<ConfigTable>();
  }
  return read_ini_table(path);
}

/// Parses "section.key=value".
inline std::pair<std::string, std::pair<std::string, std::string>> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  const auto dot = s.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError({"override '" + s + "' is not of the form section.key=value"});
  }
  return {s.substr(0, dot), {s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1)}};
}

/// Builds and validates a typed config; throws ConfigError listing every problem.
inline ExperimentConfig build_config(const ConfigTable& file_entries, const ConfigTable& overrides = {}) {
  std::vector<std::string> problems;
  ConfigTable table = default_config_table();
  apply_entries(table, file_entries, problems);
  apply_entries(table, overrides, problems);

  detail::FieldReader r(table);
  ExperimentConfig c;
  c.resolved = table;

  c.imitation.algorithm = r.parse_with("run", "algorithm", algorithm_from_string, Algorithm::DSQIL);
  c.seed = r.get<std::uint64_t>("run", "seed");
  c.episodes = r.get<int>("run", "episodes");
  c.eval_episodes = r.get<int>("run", "eval_episodes");
  c.eval_every = r.get<int>("run", "eval_every");
  c.eval_start = r.parse_with("run", "eval_start", start_mode_from_string, StartMode::Fixed);
  c.demo_trajectories = r.get<int>("run", "demo_trajectories");
  c.dataset = r.raw("run", "dataset");
  c.output_dir = r.raw("run", "output_dir");
  c.record_timing = r.get_bool("run", "record_timing");

  c.env.name = r.raw("env", "name");
  c.env.size = r.get<int>("env", "size");
  c.env.dim = r.get<int>("env", "dim");
  c.env.max_steps = r.get<int>("env", "max_steps");
  c.env.discount = r.get<double>("env", "discount");
  c.imitation.train_start = r.parse_with("env", "train_start", start_mode_from_string, StartMode::Fixed);

  const int layers = r.get<int>("agent", "hidden_layers");
  const int width = r.get<int>("agent", "hidden_width");
  const double gamma = r.get<double>("agent", "gamma");
  const double polyak = r.get<double>("agent", "polyak");
  c.discrete = {layers, width, r.get<double>("agent", "lr"), gamma, polyak};
  c.sac.hidden_layers = layers;
  c.sac.hidden_width = width;
  c.sac.actor_lr = r.get<double>("agent", "actor_lr");
  c.sac.critic_lr = r.get<double>("agent", "critic_lr");
  c.sac.alpha_lr = r.get<double>("agent", "alpha_lr");
  c.sac.gamma = gamma;
  c.sac.polyak = polyak;
  c.sac.alpha_init = r.get<double>("agent", "alpha_init");
  c.sac.learn_alpha = r.get_bool("agent", "learn_alpha");
  if (r.raw("agent", "target_entropy") != "auto") c.sac.target_entropy = r.get<double>("agent", "target_entropy");
  c.imitation.batch_size = r.get<std::size_t>("agent", "batch_size");
  c.imitation.lambda_demo = r.get<double>("agent", "lambda_demo");
  c.imitation.lambda_samp = r.get<double>("agent", "lambda_samp");
  c.imitation.updates_per_episode = r.get<int>("agent", "updates_per_episode");
  c.imitation.samp_capacity = r.get<std::size_t>("agent", "samp_capacity");

  c.discriminator.hidden_layers = r.get<int>("discriminator", "hidden_layers");
  c.discriminator.hidden_width = r.get<int>("discriminator", "hidden_width");
  c.discriminator.lr = r.get<double>("discriminator", "lr");
  c.discriminator.batch_size = r.get<std::size_t>("discriminator", "batch_size");
  c.discriminator.warmup = r.get<std::size_t>("discriminator", "warmup");

  c.expert.sweep = r.parse_with("expert", "sweep", detail::parse_int_list, std::vector<int>{2});
  c.expert.return_threshold = r.get<double>("expert", "return_threshold");
  c.expert.max_episodes = r.get<int>("expert", "max_episodes");
  c.expert.eval_episodes = r.get<int>("expert", "eval_episodes");
  c.expert.eval_every = r.get<int>("expert", "eval_every");
  c.expert.sac = c.sac;
  c.expert.sac.hidden_layers = r.get<int>("expert", "hidden_layers");
  c.expert.sac.hidden_width = r.get<int>("expert", "hidden_width");
  c.expert.batch_size = r.get<std::size_t>("expert", "batch_size");
  c.expert.warmup_steps = r.get<int>("expert", "warmup_steps");
  c.expert.updates_per_step = r.get<int>("expert", "updates_per_step");
  c.expert.stochastic_demos = r.get_bool("expert", "stochastic_demos");

  r.require(c.env.name == "gridworld" || c.env.name == "pointmass", "env.name must be gridworld or pointmass");
  r.require(c.env.size >= 2, "env.size must be >= 2");
  r.require(c.env.dim == 1 || c.env.dim == 2, "env.dim must be 1 or 2");
  r.require(c.env.max_steps >= 1, "env.max_steps must be >= 1");
  r.require(c.env.discount >= 0.0 && c.env.discount <= 1.0, "env.discount must lie in [0, 1]");
  r.require(c.episodes >= 1, "run.episodes must be >= 1");
  r.require(c.eval_episodes >= 1, "run.eval_episodes must be >= 1");
  r.require(c.eval_every >= 1, "run.eval_every must be >= 1");
  r.require(c.demo_trajectories >= 1, "run.demo_trajectories must be >= 1");
  r.require(layers >= 0 && width >= 1, "agent network shape must be non-negative layers, width >= 1");
  r.require(gamma >= 0.0 && gamma <= 1.0, "agent.gamma must lie in [0, 1]");
  r.require(polyak >= 0.0 && polyak <= 1.0, "agent.polyak must lie in [0, 1]");
  r.require(c.discrete.lr >= 0.0 && c.sac.actor_lr >= 0.0 && c.sac.critic_lr >= 0.0 && c.sac.alpha_lr >= 0.0,
            "learning rates must be >= 0");
  r.require(c.sac.alpha_init > 0.0, "agent.alpha_init must be > 0");
  r.require(c.imitation.batch_size >= 1, "agent.batch_size must be >= 1");
  r.require(c.imitation.lambda_demo >= 0.0 && c.imitation.lambda_samp >= 0.0, "lambda values must be >= 0");
  r.require(c.imitation.algorithm != Algorithm::DSQIL || c.imitation.lambda_demo > 0.0,
            "agent.lambda_demo must be > 0 for dsqil");
  r.require(c.imitation.updates_per_episode >= 0, "agent.updates_per_episode must be >= 0");
  r.require(c.imitation.samp_capacity >= 1, "agent.samp_capacity must be >= 1");
  r.require(c.discriminator.hidden_layers >= 0 && c.discriminator.hidden_width >= 1, "bad discriminator shape");
  r.require(c.discriminator.batch_size >= 1, "discriminator.batch_size must be >= 1");
  for (int k : c.expert.sweep) r.require(k >= 1, "expert.sweep entries must be >= 1");
  r.require(c.expert.max_episodes >= 1 && c.expert.eval_episodes >= 1 && c.expert.eval_every >= 1,
            "expert episode counts must be >= 1");
  r.require(c.expert.updates_per_step >= 1 && c.expert.batch_size >= 1, "expert update settings must be >= 1");

  problems.insert(problems.end(), r.problems.begin(), r.problems.end());
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  ConfigTable extra;
  for (const auto& o : overrides) {
    auto [section, kv] = parse_override(o);
    extra[section][kv.first] = kv.second;
  }
  return build_config(read_config_table(path), extra);
}

}  // namespace dsqil
