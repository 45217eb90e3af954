#include "iclc/experiment.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace iclc;
using namespace iclc::testing;
namespace fs = std::filesystem;

namespace {

struct KindCase {
  std::string kind;
  std::map<std::string, std::string> headers;  // csv file -> header line
  std::vector<std::string> json_files;
};

void PrintTo(const KindCase& c, std::ostream* os) { *os << c.kind; }

const std::vector<KindCase>& cases() {
  static const std::vector<KindCase> c = {
      {"encode-curve", {{"encode_curve.csv", "layer,role,ka_mean,ka_std,n,K"}}, {}},
      {"centroid-curve", {{"centroid_curve.csv", "layer,role,accuracy,n_train,n_test"}}, {}},
      {"position-grid", {{"position_grid.csv", "layer,grid,k_row,k_col,cosine"}}, {}},
      {"merge-curve",
       {{"merge_curve.csv",
         "layer,ka_mean,ka_std,copy_magnitude,forerunner_heads,forerunner_probe_on_label,label_probe_on_label,K"}},
       {}},
      {"induction-curve",
       {{"induction_curve.csv",
         "dataset,layer,forerunner_heads,induction_heads,correct_induction_heads,cla_vanilla,cla_head_average,"
         "cla_best_head"},
        {"head_counts.csv", "layer,head,dataset,label_mode,forerunner,induction,correct_induction"}},
       {}},
      {"subspace", {}, {"subspace.json"}},
      {"ablation", {{"ablation.csv", "kind,fraction,layers,accuracy,delta,ctrl_mean,ctrl_std,baseline,n"}}, {}},
      {"ncm",
       {{"ncm.csv",
         "layer,head,label_mean,label_std,non_label_mean,non_label_std,n_label,n_non_label,ks_statistic,ks_p_value"}},
       {}},
      {"direct-decode", {{"direct_decode.csv", "layer,accuracy,calibrated_accuracy,n"}}, {"predictions.json"}},
      {"js-divergence", {{"js_divergence.csv", "layer,head,js_mean,rank_in_layer,lowest5"}}, {}},
      {"template-ablation", {{"template_ablation.csv", "modification,accuracy,delta,n"}}, {}},
      {"early-exit",
       {{"early_exit.csv", "layer,centroid_accuracy,lm_head_accuracy,params_used,params_full,n_train,n_test"}},
       {"timing.json"}},
  };
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ExperimentConfig small_config(const std::string& kind, const fs::path& out) {
  ExperimentConfig c;
  c.kind = kind;
  c.n_queries = 12;
  c.control_seeds = 2;
  c.reference = "synthetic";
  c.out = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ICLC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

class EveryKind : public ::testing::TestWithParam<KindCase> {};

TEST_P(EveryKind, WritesSchemaAndIsDeterministic) {
  const auto& kc = GetParam();
  const auto out = temp_dir("kind_" + kc.kind);
  const auto rep = run_experiment(small_config(kc.kind, out));
  for (const auto& [file, header] : kc.headers) {
    const std::string body = slurp(out / file);
    ASSERT_FALSE(body.empty()) << file;
    EXPECT_EQ(body.substr(0, body.find('\n')), header);
    EXPECT_GT(std::count(body.begin(), body.end(), '\n'), 1) << file << " has no rows";
  }
  for (const auto& file : kc.json_files) EXPECT_NO_THROW((void)read_json((out / file).string())) << file;
  const auto man = read_json((out / "manifest.json").string());
  EXPECT_EQ(man.at("kind"), kc.kind);
  EXPECT_EQ(man.at("outputs").size(), rep.files.size());

  std::map<std::string, std::string> first;
  for (const auto& f : rep.files) first[f] = slurp(out / f);
  const std::string first_manifest = slurp(out / "manifest.json");
  run_experiment(small_config(kc.kind, out));
  for (const auto& [f, body] : first) {
    if (f == "timing.json") continue;  // wall-clock measurements
    EXPECT_EQ(slurp(out / f), body) << f;
  }
  if (kc.kind != "early-exit") {
    EXPECT_EQ(slurp(out / "manifest.json"), first_manifest);
  }
}

INSTANTIATE_TEST_SUITE_P(Fixture, EveryKind, ::testing::ValuesIn(cases()),
                         [](const auto& info) {
                           std::string n = info.param.kind;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(Config, ParsesAndRejects) {
  const auto c = experiment_config_from_json(
      {{"kind", "ablation"}, {"dataset", "d.jsonl"}, {"edge_kind", "label->query-forerunner"}, {"head", {1, 0}}},
      "/base");
  EXPECT_EQ(c.datasets, std::vector<std::string>{"d.jsonl"});
  EXPECT_EQ(c.resolve("d.jsonl"), "/base/d.jsonl");
  EXPECT_EQ(c.resolve("/abs/x"), "/abs/x");
  EXPECT_EQ(c.head->layer, 1);
  EXPECT_THROW(experiment_config_from_json({{"kidn", "ablation"}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json({{"k", "four"}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json({{"label_mode", "upside-down"}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json({{"head", {1}}}), ConfigError);
  auto bad = small_config("ablation", "/tmp/x");
  bad.fractions = {0.0};
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = small_config("nonsense", "/tmp/x");
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = small_config("ablation", "/tmp/x");
  bad.model = "/definitely/not/here";
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = small_config("ablation", "/tmp/x");
  bad.edge_kinds = {"text->label"};
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = small_config("encode-curve", "/tmp/x");
  bad.reference.clear();
  EXPECT_THROW(validate_config(bad), ConfigError);
}

TEST(Config, StagePrefixKeepsConfigErrors) {
  EXPECT_THROW(run_stage("inputs", []() -> int { throw ConfigError("x"); }), ConfigError);
  try {
    run_stage("trace", []() -> int { throw std::runtime_error("boom"); });
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "stage trace: boom");
  }
}

TEST(Cli, ExitCodes) {
  const auto dir = temp_dir("cli");
  const auto cfg = dir / "c.json";
  std::ofstream(cfg) << R"({"n_queries": 8, "control_seeds": 1, "fractions": [1.0]})";
  EXPECT_EQ(run_cli("ablate --config " + cfg.string() + " --kind ablation --out " + (dir / "ok").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "ok" / "ablation.csv"));
  EXPECT_EQ(run_cli("build-prompts --config " + cfg.string() + " --out " + (dir / "p").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "p" / "prompts.jsonl"));
  EXPECT_EQ(run_cli("trace --config " + cfg.string() + " --no-attention --out " + (dir / "t").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "t" / "traces" / "trace_0.json"));
  // Config problems exit 2.
  EXPECT_EQ(run_cli("probe --config " + cfg.string() + " --kind ablation --out " + (dir / "x").string()), 2);
  EXPECT_EQ(run_cli("report --config " + cfg.string() + " --kind nope"), 2);
  const auto typo = dir / "typo.json";
  std::ofstream(typo) << R"({"n_querys": 8})";
  EXPECT_EQ(run_cli("report --kind ablation --config " + typo.string()), 2);
  EXPECT_EQ(run_cli("report --bogus-flag"), 2);
  // Runtime failures exit 3: a model directory without weights.
  fs::create_directories(dir / "empty_model");
  EXPECT_EQ(run_cli("report --kind ablation --config " + cfg.string() + " --model " + (dir / "empty_model").string() +
                    " --out " + (dir / "y").string()),
            3);
  EXPECT_EQ(run_cli("--help"), 0);
}
