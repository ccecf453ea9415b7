#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spd/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPhase = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string output;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("-s,--set", c.sets, "override a config key (key=value), repeatable");
  app->add_option("-o,--output", c.output, "run directory (overrides output_dir)");
  app->add_flag("-v,--verbose", c.verbose, "progress on stderr");
}

spd::RunConfig build_config(const Common& c) {
  spd::RunConfig cfg = c.config.empty() ? spd::RunConfig::defaults() : spd::RunConfig::load(c.config);
  std::vector<std::pair<std::string, std::string>> kv;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw spd::ConfigError("--set expects key=value, got '" + s + "'");
    kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : kv)
    if (k == "preset") cfg.set(k, v);
  for (const auto& [k, v] : kv)
    if (k != "preset") cfg.set(k, v);
  if (!c.output.empty()) cfg.output_dir = c.output;
  cfg.validate();
  return cfg;
}

void print_result(const spd::RunResult& r) {
  for (const auto& p : r.skipped) std::cout << "phase " << p << ": up to date\n";
  for (const auto& p : r.ran) std::cout << "phase " << p << ": done\n";
  std::cout << "manifest: " << r.manifest.run_dir << "/manifest.json\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-distillation with gradient-subspace K/V projection on a toy transformer"};
  app.require_subcommand(1);
  app.footer(std::string("Environment: ") + spd::kOutputRootEnv +
             " prefixes relative output directories.\nConfig keys:\n" + spd::RunConfig::describe_keys());

  Common common;
  std::string kind = "spd";
  std::string which = "psr";
  std::string axis = "loss_mode";
  std::vector<std::string> values;

  struct Stage {
    const char* name;
    const char* help;
  };
  const std::vector<Stage> stages = {
      {"pretrain", "pretrain (or import) the toy base model"},
      {"calibrate", "harvest correctness-aligned K/V gradients"},
      {"extract", "build the projection bundle"},
      {"generate", "decode the self-generated corpus"},
      {"finetune", "LoRA fine-tuning on the corpus"},
      {"evaluate", "in-task and cross-task evaluation"},
  };
  std::vector<CLI::App*> stage_cmds;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    sub->add_option("-k,--kind", kind, "spd | base | psr | ssd_approx")->capture_default_str();
    stage_cmds.push_back(sub);
  }
  auto* run_spd_cmd = app.add_subcommand("run-spd", "full pipeline");
  add_common(run_spd_cmd, common);
  auto* base_cmd = app.add_subcommand("run-baseline", "baseline pipeline");
  add_common(base_cmd, common);
  base_cmd->add_option("-w,--which", which, "base | psr | ssd_approx")->capture_default_str();
  auto* sweep_cmd = app.add_subcommand("sweep", "ablation sweep over one axis");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("-a,--axis", axis, "loss_mode | calib_size | rank | project_mode")
      ->capture_default_str();
  sweep_cmd->add_option("--values", values, "axis values (default: the standard sweep)")->delimiter(',');
  auto* show_cmd = app.add_subcommand("show-config", "print the resolved configuration");
  add_common(show_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    const spd::RunConfig cfg = build_config(common);
    const spd::PipelineOptions base_opts{"", common.verbose};
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (!stage_cmds[i]->parsed()) continue;
      const spd::RunKind k = spd::parse_run_kind(kind);
      print_result(spd::run_pipeline(cfg, k, {stages[i].name, common.verbose}));
      return 0;
    }
    if (run_spd_cmd->parsed()) {
      print_result(spd::run_spd(cfg, base_opts));
    } else if (base_cmd->parsed()) {
      print_result(spd::run_baseline(cfg, spd::parse_run_kind(which), base_opts));
    } else if (sweep_cmd->parsed()) {
      const auto ax = spd::parse_ablation_axis(axis);
      const auto rows =
          spd::run_ablation(cfg, ax, values.empty() ? spd::default_axis_values(ax) : values, base_opts);
      std::cout << spd::ablation_csv(ax, rows);
    } else if (show_cmd->parsed()) {
      std::cout << cfg.dump();
    }
  } catch (const spd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const spd::PhaseError& e) {
    std::cerr << e.what() << "\n";
    return kExitPhase;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPhase;
  }
  return 0;
}
