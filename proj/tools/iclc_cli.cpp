// iclc: command-line front end for the experiment pipelines.
//
//   iclc <verb> --config cfg.json [--model DIR|fixture] [--seed N] [--out DIR] [--kind KIND]
//
// Exit codes: 0 success, 2 config error, 3 runtime error.

#include "iclc/iclc.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

const std::map<std::string, std::set<std::string>>& verb_kinds() {
  static const std::map<std::string, std::set<std::string>> m = {
      {"metrics", {"encode-curve", "centroid-curve", "position-grid", "merge-curve"}},
      {"detect", {"induction-curve", "subspace", "ncm", "js-divergence"}},
      {"ablate", {"ablation", "template-ablation"}},
      {"probe", {"direct-decode", "early-exit"}},
  };
  return m;
}

struct GlobalFlags {
  std::string config;
  std::optional<std::string> model;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> kind;
};

iclc::ExperimentConfig resolve_config(const GlobalFlags& g) {
  iclc::ExperimentConfig cfg;
  if (!g.config.empty()) cfg = iclc::load_experiment_config(g.config);
  // Command-line paths are relative to the working directory, not the config file.
  if (g.model) cfg.model = *g.model == "fixture" ? *g.model : std::filesystem::absolute(*g.model).string();
  if (g.seed) cfg.seed = *g.seed;
  if (g.out) cfg.out = *g.out;
  else if (!g.config.empty()) cfg.out = cfg.resolve(cfg.out);
  if (g.kind) cfg.kind = *g.kind;
  return cfg;
}

void print_report(const iclc::ExperimentReport& rep) {
  std::cout << rep.kind << " -> " << rep.out_dir.string() << "\n";
  for (const auto& f : rep.files) std::cout << "  " << f << "\n";
  std::cout << "  manifest.json\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning circuit analysis"};
  app.require_subcommand(1);
  GlobalFlags g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--model", g.model, "Model directory, or 'fixture'");
    sub->add_option("--seed", g.seed, "Seed for the run's generator");
    sub->add_option("--out", g.out, "Output directory");
    sub->add_option("--kind", g.kind, "Experiment kind (overrides the config)");
  };

  auto* build = app.add_subcommand("build-prompts", "Write the k-shot prompts of a config as JSON lines");
  add_globals(build);
  auto* trace = app.add_subcommand("trace", "Capture and save hidden states and attention for each prompt");
  add_globals(trace);
  bool no_attention = false;
  trace->add_flag("--no-attention", no_attention, "Skip attention matrices");
  std::map<std::string, CLI::App*> runners;
  for (const auto& [verb, kinds] : verb_kinds()) {
    std::string help = "Run one of:";
    for (const auto& k : kinds) help += " " + k;
    runners[verb] = app.add_subcommand(verb, help);
    add_globals(runners[verb]);
  }
  auto* report = app.add_subcommand("report", "Run any experiment kind from a config");
  add_globals(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    const auto cfg = resolve_config(g);
    if (build->parsed()) {
      std::filesystem::create_directories(cfg.out);
      std::cout << iclc::build_prompts(cfg, (std::filesystem::path(cfg.out) / "prompts.jsonl").string()) << "\n";
      return 0;
    }
    if (trace->parsed()) {
      iclc::SaveOptions opts;
      opts.with_attention = !no_attention;
      const auto dir = (std::filesystem::path(cfg.out) / "traces").string();
      const auto names = iclc::trace_inputs(cfg, dir, opts);
      std::cout << names.size() << " traces -> " << dir << "\n";
      return 0;
    }
    for (const auto& [verb, sub] : runners) {
      if (!sub->parsed()) continue;
      if (!verb_kinds().at(verb).count(cfg.kind)) {
        throw iclc::ConfigError("verb '" + verb + "' does not run kind '" + cfg.kind + "'");
      }
    }
    print_report(iclc::run_experiment(cfg));
    return 0;
  } catch (const iclc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
