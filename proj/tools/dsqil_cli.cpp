#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsqil/config.hpp"
#include "dsqil/harness.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "INI config or run manifest")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "overrides run.seed");
  cmd->add_option("-o,--out", o.out, "overrides run.output_dir");
  cmd->add_option("--set", o.overrides, "section.key=value override (repeatable)");
}

dsqil::ExperimentConfig resolve(const CommonOptions& o) {
  std::vector<std::string> overrides = o.overrides;
  if (o.seed) overrides.push_back("run.seed=" + std::to_string(*o.seed));
  if (!o.out.empty()) overrides.push_back("run.output_dir=" + o.out);
  dsqil::ConfigTable extra;
  for (const auto& s : overrides) {
    auto [section, kv] = dsqil::parse_override(s);
    extra[section][kv.first] = kv.second;
  }
  const dsqil::ConfigTable file = o.config.empty() ? dsqil::ConfigTable{} : dsqil::read_config_table(o.config);
  return dsqil::build_config(file, extra);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Imitation learning with BC, SQIL and DSQIL on toy environments"};
  app.set_version_flag("--version", std::string(dsqil::kVersion));
  app.require_subcommand(1);

  CommonOptions expert_opts, train_opts, eval_opts;
  auto* expert = app.add_subcommand("expert", "build an expert and write nested demonstration datasets");
  add_common(expert, expert_opts);

  auto* train = app.add_subcommand("train", "train an imitation agent from a demonstration dataset");
  add_common(train, train_opts);

  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  add_common(eval, eval_opts);
  std::string checkpoint;
  int episodes = 0;
  std::string start = "fixed";
  eval->add_option("--checkpoint", checkpoint, "checkpoint.json or expert.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", episodes, "evaluation episodes (default run.eval_episodes)");
  eval->add_option("--start", start, "start distribution")->check(CLI::IsMember({"fixed", "shifted"}));

  auto* report = app.add_subcommand("report", "tabulate final returns of several runs");
  std::vector<std::string> inputs;
  std::string report_out = "report";
  report->add_option("inputs", inputs, "run directories or summary.json files")->required();
  report->add_option("-o,--out", report_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*expert) {
      const auto cfg = resolve(expert_opts);
      const auto out = dsqil::generate_expert(cfg);
      std::printf("expert return %.6f +/- %.6f\n", out.expert_return.mean, out.expert_return.std);
      for (const auto& p : out.datasets) std::printf("wrote %s\n", p.string().c_str());
    } else if (*train) {
      const auto cfg = resolve(train_opts);
      const auto out = dsqil::run_training(cfg);
      std::printf("%s final return %.6f +/- %.6f over %d episodes (%lld env steps)\n",
                  dsqil::to_string(cfg.imitation.algorithm).c_str(), out.final_eval.mean, out.final_eval.std,
                  cfg.eval_episodes, static_cast<long long>(out.env_steps));
      std::printf("wrote %s\n", cfg.output_dir.string().c_str());
    } else if (*eval) {
      const auto cfg = resolve(eval_opts);
      const int n = episodes > 0 ? episodes : cfg.eval_episodes;
      const auto r = dsqil::evaluate_checkpoint(checkpoint, cfg.env, n, dsqil::start_mode_from_string(start), cfg.seed);
      std::printf("return %.6f +/- %.6f over %d episodes\n", r.mean, r.std, n);
    } else if (*report) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      const auto out = dsqil::emit_report(paths, report_out);
      std::cout << out.table;
    }
  } catch (const dsqil::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
