#pragma once

// Config-driven experiment pipelines. Each kind reads a model, tokenizer,
// template and dataset, builds k-shot inputs from one seeded generator, streams
// traces through the analysis modules and writes schema-checked CSV/JSON plus
// a run manifest.

#include "iclc/circuit_scan.hpp"
#include "iclc/csv.hpp"
#include "iclc/errors.hpp"
#include "iclc/fixture.hpp"
#include "iclc/intervene.hpp"
#include "iclc/model.hpp"
#include "iclc/probe_decode.hpp"
#include "iclc/prompt.hpp"
#include "iclc/rep_metrics.hpp"
#include "iclc/tokenizer.hpp"
#include "iclc/trace_store.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace iclc {

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k = {"encode-curve",  "centroid-curve", "position-grid",  "merge-curve",
                                             "induction-curve", "subspace",     "ablation",       "ncm",
                                             "direct-decode", "js-divergence",  "template-ablation", "early-exit"};
  return k;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Config

struct ExperimentConfig {
  std::string kind;
  std::string model = "fixture";  // model directory, or "fixture" for the built-in induction model
  std::string tokenizer;          // directory with vocab.json + merges.txt; defaults to the model directory
  std::string template_path;      // defaults to <model>/template.json
  std::vector<std::string> datasets;
  int k = 4;
  int n_queries = 64;
  std::uint64_t seed = 0;
  Perturbation label_mode = Perturbation::none;
  std::vector<int> layers;  // empty: every layer the kind supports
  std::vector<std::string> roles;
  std::string pooling = "last";
  std::string reference;  // matrix path, or "synthetic"
  int reference_dim = 32;
  std::optional<int> K;
  std::vector<double> fractions = {0.25, 0.5, 0.75, 1.0};
  std::vector<std::string> edge_kinds;
  int control_seeds = 5;
  InterventionMode intervention_mode = InterventionMode::zero_post_softmax;
  std::vector<std::string> modifications = {"drop-newline", "drop-colon", "drop-prefixes", "drop-all"};
  std::optional<HeadId> head;
  int target_label = 0;
  int grid_resolution = 32;
  std::vector<int> ks;
  std::optional<int> n_train;
  double multiplier = 5.0;
  bool bos = true;
  bool augmented = false;
  int fixture_dataset_size = 256;
  std::string out = "out";

  std::filesystem::path base_dir;  // relative paths resolve against this

  std::string resolve(const std::string& p) const {
    if (p.empty() || p == "fixture" || p == "synthetic") return p;
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (base_dir / path).lexically_normal().string();
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j{{"kind", c.kind},
                   {"model", c.model},
                   {"tokenizer", c.tokenizer},
                   {"template", c.template_path},
                   {"datasets", c.datasets},
                   {"k", c.k},
                   {"n_queries", c.n_queries},
                   {"seed", c.seed},
                   {"label_mode", perturbation_name(c.label_mode)},
                   {"layers", c.layers},
                   {"roles", c.roles},
                   {"pooling", c.pooling},
                   {"reference", c.reference},
                   {"reference_dim", c.reference_dim},
                   {"fractions", c.fractions},
                   {"edge_kinds", c.edge_kinds},
                   {"control_seeds", c.control_seeds},
                   {"intervention_mode", to_string(c.intervention_mode)},
                   {"modifications", c.modifications},
                   {"target_label", c.target_label},
                   {"grid_resolution", c.grid_resolution},
                   {"ks", c.ks},
                   {"multiplier", c.multiplier},
                   {"bos", c.bos},
                   {"augmented", c.augmented},
                   {"fixture_dataset_size", c.fixture_dataset_size},
                   {"out", c.out}};
  j["K"] = c.K ? nlohmann::json(*c.K) : nlohmann::json(nullptr);
  j["n_train"] = c.n_train ? nlohmann::json(*c.n_train) : nlohmann::json(nullptr);
  j["head"] = c.head ? nlohmann::json{c.head->layer, c.head->head} : nlohmann::json(nullptr);
  return j;
}

// Unknown keys are rejected so typos surface as config errors.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {
      "kind",       "model",          "tokenizer",      "template",     "dataset",       "datasets",
      "k",          "n_queries",      "seed",           "label_mode",   "layers",        "roles",
      "pooling",    "reference",      "reference_dim",  "K",            "fractions",     "edge_kind",
      "edge_kinds", "control_seeds",  "intervention_mode", "modifications", "head",       "target_label",
      "grid_resolution", "ks",        "n_train",        "multiplier",   "bos",           "augmented",
      "fixture_dataset_size", "out"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown config key: " + it.key());
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    c.kind = j.value("kind", std::string());
    c.model = j.value("model", c.model);
    c.tokenizer = j.value("tokenizer", std::string());
    c.template_path = j.value("template", std::string());
    if (j.contains("dataset")) c.datasets.push_back(j.at("dataset").get<std::string>());
    if (j.contains("datasets")) {
      for (const auto& d : j.at("datasets")) c.datasets.push_back(d.get<std::string>());
    }
    c.k = j.value("k", c.k);
    c.n_queries = j.value("n_queries", c.n_queries);
    c.seed = j.value("seed", c.seed);
    c.label_mode = parse_perturbation(j.value("label_mode", std::string("none")));
    c.layers = j.value("layers", c.layers);
    c.roles = j.value("roles", c.roles);
    c.pooling = j.value("pooling", c.pooling);
    c.reference = j.value("reference", std::string());
    c.reference_dim = j.value("reference_dim", c.reference_dim);
    if (j.contains("K") && !j.at("K").is_null()) c.K = j.at("K").get<int>();
    c.fractions = j.value("fractions", c.fractions);
    if (j.contains("edge_kind")) c.edge_kinds.push_back(j.at("edge_kind").get<std::string>());
    if (j.contains("edge_kinds")) {
      for (const auto& e : j.at("edge_kinds")) c.edge_kinds.push_back(e.get<std::string>());
    }
    c.control_seeds = j.value("control_seeds", c.control_seeds);
    const std::string mode = j.value("intervention_mode", std::string("zero-post-softmax"));
    if (mode == "zero-post-softmax") {
      c.intervention_mode = InterventionMode::zero_post_softmax;
    } else if (mode == "mask-pre-softmax") {
      c.intervention_mode = InterventionMode::mask_pre_softmax;
    } else {
      throw ConfigError("unknown intervention mode: " + mode);
    }
    c.modifications = j.value("modifications", c.modifications);
    if (j.contains("head") && !j.at("head").is_null()) {
      const auto h = j.at("head").get<std::vector<int>>();
      if (h.size() != 2) throw ConfigError("head must be [layer, head]");
      c.head = HeadId{h[0], h[1]};
    }
    c.target_label = j.value("target_label", c.target_label);
    c.grid_resolution = j.value("grid_resolution", c.grid_resolution);
    c.ks = j.value("ks", c.ks);
    if (j.contains("n_train") && !j.at("n_train").is_null()) c.n_train = j.at("n_train").get<int>();
    c.multiplier = j.value("multiplier", c.multiplier);
    c.bos = j.value("bos", c.bos);
    c.augmented = j.value("augmented", c.augmented);
    c.fixture_dataset_size = j.value("fixture_dataset_size", c.fixture_dataset_size);
    c.out = j.value("out", c.out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// Checks everything that can be checked without loading the model.
inline void validate_config(const ExperimentConfig& c, bool need_kind = true) {
  namespace fs = std::filesystem;
  if (need_kind) {
    const auto& kinds = experiment_kinds();
    if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end()) {
      throw ConfigError("unknown experiment kind: '" + c.kind + "'");
    }
  }
  if (c.k < 0) throw ConfigError("k must be >= 0");
  if (c.n_queries < 1) throw ConfigError("n_queries must be >= 1");
  auto must_exist = [&](const std::string& p, const char* what) {
    if (!p.empty() && p != "fixture" && p != "synthetic" && !fs::exists(c.resolve(p))) {
      throw ConfigError(std::string(what) + " does not exist: " + c.resolve(p));
    }
  };
  must_exist(c.model, "model");
  must_exist(c.tokenizer, "tokenizer");
  must_exist(c.template_path, "template");
  for (const auto& d : c.datasets) must_exist(d, "dataset");
  must_exist(c.reference, "reference");
  for (double f : c.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("ablation fractions must lie in (0, 1]");
  }
  for (const auto& e : c.edge_kinds) (void)parse_edge_kind(e);
  for (const auto& m : c.modifications) (void)TemplateModification::parse(m);
  if (c.control_seeds < 0) throw ConfigError("control_seeds must be >= 0");
  if (c.pooling != "last" && c.pooling != "first" && c.pooling != "all") throw ConfigError("unknown pooling: " + c.pooling);
  if (c.kind == "encode-curve" && c.reference.empty()) throw ConfigError("encode-curve needs a reference matrix");
  if (c.grid_resolution < 2) throw ConfigError("grid_resolution must be >= 2");
  for (int kk : c.ks)
    if (kk < 0) throw ConfigError("ks entries must be >= 0");
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return experiment_config_from_json(j, std::filesystem::path(path).parent_path());
}

// Prefixes the stage name onto any error. Config errors keep their type.
template <typename F>
auto run_stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("stage " + name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error("stage " + name + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Context

struct NamedDataset {
  std::string name;
  std::vector<LabeledExample> examples;
};

struct ExperimentContext {
  ExperimentConfig config;
  Model model;
  Tokenizer tokenizer;
  Template tmpl;
  std::vector<NamedDataset> datasets;
  std::optional<int> bos_id;
  std::mt19937_64 rng;

  int n_layers() const { return model.config.n_layers; }

  // Requested layers clipped to [lo, hi]; all of them when none were requested.
  std::vector<int> layers(int lo, int hi) const {
    std::vector<int> out;
    if (config.layers.empty()) {
      for (int l = lo; l <= hi; ++l) out.push_back(l);
      return out;
    }
    for (int l : config.layers) {
      if (l < lo || l > hi) {
        throw ConfigError("layer " + std::to_string(l) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) +
                          "] for " + config.kind);
      }
      out.push_back(l);
    }
    return out;
  }

  Pooling pooling() const {
    if (config.pooling == "first") return Pooling::first;
    if (config.pooling == "all") return Pooling::all;
    return Pooling::last;
  }
};

inline ExperimentContext open_context(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  ExperimentContext ctx;
  ctx.config = cfg;
  ctx.rng.seed(cfg.seed);
  run_stage("load", [&] {
    if (cfg.model == "fixture") {
      auto fx = fixture::build();
      ctx.model = fx.model;
      ctx.tokenizer = fx.tokenizer;
      ctx.tmpl = fx.tmpl;
      if (cfg.datasets.empty()) {
        ctx.datasets.push_back({"fixture", fixture::make_dataset(cfg.fixture_dataset_size, 7)});
      }
    } else {
      const fs::path dir = cfg.resolve(cfg.model);
      ctx.model = load_model((dir / "model.safetensors").string(), (dir / "config.json").string());
      if (ctx.model.config.tag.empty()) ctx.model.config.tag = dir.filename().string();
    }
    if (!cfg.tokenizer.empty() || cfg.model != "fixture") {
      const fs::path tdir = cfg.resolve(cfg.tokenizer.empty() ? cfg.model : cfg.tokenizer);
      ctx.tokenizer = Tokenizer::load((tdir / "vocab.json").string(), (tdir / "merges.txt").string());
    }
    if (!cfg.template_path.empty()) {
      ctx.tmpl = load_template(cfg.resolve(cfg.template_path));
    } else if (cfg.model != "fixture") {
      const fs::path p = fs::path(cfg.resolve(cfg.model)) / "template.json";
      if (!fs::exists(p)) throw ConfigError("no template given and " + p.string() + " is missing");
      ctx.tmpl = load_template(p.string());
    }
    validate_template(ctx.tokenizer, ctx.tmpl);
    std::vector<std::string> paths = cfg.datasets;
    if (paths.empty() && cfg.model != "fixture") {
      const fs::path p = fs::path(cfg.resolve(cfg.model)) / "dataset.jsonl";
      if (!fs::exists(p)) throw ConfigError("no dataset given and " + p.string() + " is missing");
      paths.push_back(p.string());
    }
    for (const auto& p : paths) {
      const std::string full = cfg.resolve(p);
      ctx.datasets.push_back({fs::path(full).stem().string(), load_dataset(full, ctx.tmpl.labels)});
    }
    if (cfg.bos) {
      if (ctx.model.config.bos_token_id) {
        ctx.bos_id = ctx.model.config.bos_token_id;
      } else if (auto id = ctx.tokenizer.token_id("<|endoftext|>")) {
        ctx.bos_id = *id;
      }
    }
  });
  return ctx;
}

// n_queries k-shot inputs. Queries and the demonstration pool are disjoint
// slices of one seeded shuffle of the dataset.
inline std::vector<IclInput> make_experiment_inputs(ExperimentContext& ctx, const std::vector<LabeledExample>& data,
                                                    const Template& tmpl, int k, int n_queries) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), ctx.rng);
  if (static_cast<int>(data.size()) < n_queries + k) {
    throw ConfigError("dataset has " + std::to_string(data.size()) + " examples, need at least n_queries + k = " +
                      std::to_string(n_queries + k));
  }
  std::vector<LabeledExample> queries;
  std::vector<LabeledExample> pool;
  for (std::size_t i = 0; i < order.size(); ++i) (i < static_cast<std::size_t>(n_queries) ? queries : pool).push_back(data[order[i]]);
  BuildOptions opts;
  opts.bos_id = ctx.bos_id;
  opts.augmented = ctx.config.augmented;
  std::vector<IclInput> out;
  for (const auto& q : queries) {
    const auto demos = sample_demos(pool, k, tmpl.n_labels(), ctx.rng);
    IclInput in = build_icl_input(ctx.tokenizer, demos, q, tmpl, opts);
    if (ctx.config.label_mode != Perturbation::none) in = perturb_labels(ctx.tokenizer, in, ctx.config.label_mode, ctx.rng, pool);
    if (in.size() > ctx.model.config.max_seq) {
      throw ConfigError("prompt of " + std::to_string(in.size()) + " tokens exceeds max_seq " +
                        std::to_string(ctx.model.config.max_seq) + "; lower k");
    }
    out.push_back(std::move(in));
  }
  return out;
}

inline std::vector<IclInput> make_experiment_inputs(ExperimentContext& ctx) {
  if (ctx.datasets.empty()) throw ConfigError("no dataset");
  return make_experiment_inputs(ctx, ctx.datasets.front().examples, ctx.tmpl, ctx.config.k, ctx.config.n_queries);
}

// Clustered stand-in for external sentence embeddings: one random center per
// label plus isotropic noise, one row per dataset example id.
inline MatrixD synthetic_reference(const std::vector<LabeledExample>& data, int dim, std::uint64_t seed,
                                   double separation = 3.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  int n_labels = 0;
  int n_rows = 0;
  for (const auto& ex : data) {
    n_labels = std::max(n_labels, ex.label + 1);
    n_rows = std::max(n_rows, ex.id + 1);
  }
  MatrixD centers(n_labels, dim);
  for (int y = 0; y < n_labels; ++y) {
    for (int d = 0; d < dim; ++d) centers(y, d) = N(rng);
    centers.row(y) *= separation / centers.row(y).norm();
  }
  MatrixD ref = MatrixD::Zero(n_rows, dim);
  for (const auto& ex : data) {
    for (int d = 0; d < dim; ++d) ref(ex.id, d) = centers(ex.label, d) + N(rng);
  }
  return ref;
}

// ---------------------------------------------------------------------------
// Report

struct ExperimentReport {
  std::string kind;
  std::filesystem::path out_dir;
  std::vector<std::string> files;  // relative to out_dir, in write order
  nlohmann::json summary = nlohmann::json::object();
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

inline void emit(ExperimentReport& rep, const std::string& name, const CsvTable& t) {
  t.write((rep.out_dir / name).string());
  rep.files.push_back(name);
}

inline void emit(ExperimentReport& rep, const std::string& name, const nlohmann::json& j) {
  write_text(rep.out_dir / name, j.dump(2) + "\n");
  rep.files.push_back(name);
}

inline double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double pop_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline std::vector<int> query_truths(const std::vector<IclInput>& inputs) {
  std::vector<int> y;
  for (const auto& in : inputs) y.push_back(in.query_truth);
  return y;
}

// Hidden state rows for one role, one per input, at every layer 0..L.
inline std::vector<MatrixD> collect_role(const Model& model, const std::vector<IclInput>& inputs, const RoleRef& role,
                                         Pooling pooling) {
  const int L = model.config.n_layers;
  std::vector<MatrixD> out(static_cast<std::size_t>(L + 1),
                           MatrixD(static_cast<Eigen::Index>(inputs.size()), model.config.d_model));
  ForwardOptions opts;
  opts.record_attention = false;
  opts.compute_logits = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto tr = forward(model, inputs[i].tokens, {}, opts);
    const auto pos = inputs[i].positions(role, pooling);
    for (int l = 0; l <= L; ++l) {
      VectorD v = VectorD::Zero(model.config.d_model);
      for (int p : pos) v += tr.hidden[static_cast<std::size_t>(l)].row(p).transpose().cast<double>();
      out[static_cast<std::size_t>(l)].row(static_cast<Eigen::Index>(i)) = (v / static_cast<double>(pos.size())).transpose();
    }
  }
  return out;
}

// 64 neighbours when the sample is large enough, otherwise a quarter of it so
// the alignment does not saturate.
inline int default_K(const ExperimentConfig& c, int n) {
  const int K = c.K.value_or(std::max(1, std::min(64, n / 4)));
  if (K < 1 || K >= n) {
    throw ConfigError("K = " + std::to_string(K) + " needs 1 <= K < n with n = " + std::to_string(n));
  }
  return K;
}

inline int default_n_train(const ExperimentConfig& c, int n) {
  const int t = c.n_train.value_or(n / 2);
  if (t < 1 || t >= n) throw ConfigError("n_train must leave at least one training and one test input");
  return t;
}

// Stratified split: each label gets a share of the training set proportional to
// its count (at least one when present), filled with its earliest inputs.
struct Split {
  std::vector<std::size_t> train, test;
};

inline Split stratified_split(const std::vector<int>& y, int n_train, int n_labels) {
  const int n = static_cast<int>(y.size());
  std::vector<int> count(static_cast<std::size_t>(n_labels), 0);
  for (int v : y) ++count[static_cast<std::size_t>(v)];
  std::vector<int> quota(static_cast<std::size_t>(n_labels), 0);
  std::vector<std::pair<double, int>> frac;
  int used = 0;
  for (int l = 0; l < n_labels; ++l) {
    const double exact = static_cast<double>(n_train) * count[static_cast<std::size_t>(l)] / n;
    quota[static_cast<std::size_t>(l)] = static_cast<int>(exact);
    used += quota[static_cast<std::size_t>(l)];
    frac.emplace_back(-(exact - quota[static_cast<std::size_t>(l)]), l);
  }
  std::sort(frac.begin(), frac.end());
  for (std::size_t i = 0; used < n_train && i < frac.size(); ++i, ++used) ++quota[static_cast<std::size_t>(frac[i].second)];
  for (int l = 0; l < n_labels; ++l) {
    auto& q = quota[static_cast<std::size_t>(l)];
    if (q > 0 || count[static_cast<std::size_t>(l)] == 0) continue;
    auto donor = std::max_element(quota.begin(), quota.end());
    if (*donor > 1) {
      --*donor;
      q = 1;
    }
  }
  Split s;
  std::vector<int> taken(static_cast<std::size_t>(n_labels), 0);
  for (int i = 0; i < n; ++i) {
    const auto l = static_cast<std::size_t>(y[static_cast<std::size_t>(i)]);
    if (taken[l] < quota[l]) {
      ++taken[l];
      s.train.push_back(static_cast<std::size_t>(i));
    } else {
      s.test.push_back(static_cast<std::size_t>(i));
    }
  }
  return s;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

inline MatrixD pick_rows(const MatrixD& m, const std::vector<std::size_t>& idx) {
  MatrixD out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

// Applies the attention-input norm of `layer` to each row.
inline MatrixD block_input_norm(const Model& model, int layer, const MatrixD& reps) {
  const Matrix in = reps.cast<float>();
  Matrix outm;
  apply_norm(model.config, model.blocks[static_cast<std::size_t>(layer)].ln_attn, in, outm);
  return outm.cast<double>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kinds

inline void run_encode_curve(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const MatrixD reference = run_stage("reference", [&] {
    if (cfg.reference == "synthetic") {
      return synthetic_reference(ctx.datasets.front().examples, cfg.reference_dim, ctx.rng());
    }
    return load_reference_matrix(cfg.resolve(cfg.reference));
  });
  const int n = static_cast<int>(inputs.size());
  const int K = detail::default_K(cfg, n);
  MatrixD ref_rows(n, reference.cols());
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    const int id = inputs[static_cast<std::size_t>(i)].query.id;
    if (id < 0 || id >= reference.rows()) {
      throw ConfigError("reference matrix has " + std::to_string(reference.rows()) + " rows, example id " +
                        std::to_string(id) + " is out of range");
    }
    ref_rows.row(i) = reference.row(id);
    ids.push_back(std::to_string(id));
  }
  const SimMap ref_map = run_stage("reference-similarity", [&] { return similarity_map(ref_rows, ids); });
  const std::vector<std::string> roles = cfg.roles.empty() ? std::vector<std::string>{"query_forerunner"} : cfg.roles;
  CsvTable t({{"layer", ColumnType::integer},
              {"role", ColumnType::text},
              {"ka_mean", ColumnType::real},
              {"ka_std", ColumnType::real},
              {"n", ColumnType::integer},
              {"K", ColumnType::integer}});
  const auto layers = ctx.layers(0, ctx.n_layers());
  for (const auto& role_s : roles) {
    const RoleRef role = RoleRef::parse(role_s);
    const auto per_layer = run_stage("trace", [&] { return detail::collect_role(ctx.model, inputs, role, ctx.pooling()); });
    for (int l : layers) {
      const auto ka = run_stage("kernel-alignment", [&] {
        return kernel_alignment(similarity_map(per_layer[static_cast<std::size_t>(l)], ids), ref_map, {K});
      });
      t.add({cell(l), cell(role.str()), cell(ka.mean), cell(ka.std), cell(n), cell(K)});
    }
  }
  detail::emit(rep, "encode_curve.csv", t);
}

inline void run_centroid_curve(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const int n = static_cast<int>(inputs.size());
  const int n_train = detail::default_n_train(cfg, n);
  const auto y = detail::query_truths(inputs);
  const auto split = detail::stratified_split(y, n_train, ctx.tmpl.n_labels());
  const auto y_train = detail::pick(y, split.train);
  const std::vector<std::string> roles = cfg.roles.empty() ? std::vector<std::string>{"query_forerunner"} : cfg.roles;
  CsvTable t({{"layer", ColumnType::integer},
              {"role", ColumnType::text},
              {"accuracy", ColumnType::real},
              {"n_train", ColumnType::integer},
              {"n_test", ColumnType::integer}});
  for (const auto& role_s : roles) {
    const RoleRef role = RoleRef::parse(role_s);
    const auto per_layer = run_stage("trace", [&] { return detail::collect_role(ctx.model, inputs, role, ctx.pooling()); });
    for (int l : ctx.layers(0, ctx.n_layers())) {
      const MatrixD& reps = per_layer[static_cast<std::size_t>(l)];
      const auto cm = run_stage("centroid", [&] { return train_centroids(detail::pick_rows(reps, split.train), y_train, ctx.tmpl.n_labels()); });
      int correct = 0;
      for (auto i : split.test)
        if (centroid_predict(cm, reps.row(static_cast<Eigen::Index>(i)).transpose()) == y[i]) ++correct;
      t.add({cell(l), cell(role.str()), cell(static_cast<double>(correct) / (n - n_train)), cell(n_train), cell(n - n_train)});
    }
  }
  detail::emit(rep, "centroid_curve.csv", t);
}

inline void run_position_grid(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  std::vector<int> ks = cfg.ks;
  if (ks.empty())
    for (int i = 0; i <= cfg.k; ++i) ks.push_back(i);
  const int max_k = *std::max_element(ks.begin(), ks.end());
  const auto& data = ctx.datasets.front().examples;
  if (static_cast<int>(data.size()) < cfg.n_queries + max_k) throw ConfigError("dataset too small for position grid");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), ctx.rng);
  std::vector<LabeledExample> targets, pool;
  for (std::size_t i = 0; i < order.size(); ++i) (i < static_cast<std::size_t>(cfg.n_queries) ? targets : pool).push_back(data[order[i]]);
  // One demonstration sequence; prompts with fewer demonstrations use its prefix.
  const auto demos = sample_demos(pool, max_k, ctx.tmpl.n_labels(), ctx.rng);
  BuildOptions opts;
  opts.bos_id = ctx.bos_id;
  const auto layers = ctx.layers(0, ctx.n_layers());
  std::map<int, std::map<std::pair<int, int>, VectorD>> cells;  // layer -> (target, k) -> state
  std::vector<int> target_ids;
  run_stage("trace", [&] {
    ForwardOptions fo;
    fo.record_attention = false;
    fo.compute_logits = false;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      target_ids.push_back(static_cast<int>(t));
      for (int kk : ks) {
        const std::vector<LabeledExample> prefix(demos.begin(), demos.begin() + kk);
        const auto in = build_icl_input(ctx.tokenizer, prefix, targets[t], ctx.tmpl, opts);
        const auto tr = forward(ctx.model, in.tokens, {}, fo);
        for (int l : layers) {
          cells[l][{static_cast<int>(t), kk}] =
              tr.hidden[static_cast<std::size_t>(l)].row(in.query_forerunner_pos()).transpose().cast<double>();
        }
      }
    }
  });
  CsvTable t({{"layer", ColumnType::integer},
              {"grid", ColumnType::text},
              {"k_row", ColumnType::integer},
              {"k_col", ColumnType::integer},
              {"cosine", ColumnType::real}});
  for (int l : layers) {
    const auto g = run_stage("grid", [&] { return position_similarity_grid(cells[l], target_ids, ks); });
    for (const char* which : {"same", "cross"}) {
      const MatrixD& m = std::string(which) == "same" ? g.same : g.cross;
      for (std::size_t a = 0; a < ks.size(); ++a)
        for (std::size_t b = 0; b < ks.size(); ++b)
          t.add({cell(l), cell(which), cell(ks[a]), cell(ks[b]),
                 cell(m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)))});
    }
  }
  detail::emit(rep, "position_grid.csv", t);
}

// Forerunner -> label copying per layer: kernel alignment between forerunner
// states at layer l and label states at layer l + 1, copy magnitude, marked
// forerunner-token heads, and centroid probes read on label tokens.
inline void run_merge_curve(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  if (cfg.k < 1) throw ConfigError("merge-curve needs k >= 1");
  const int L = ctx.n_layers();
  const int d = ctx.model.config.d_model;
  const int n = static_cast<int>(inputs.size());
  const int rows = n * cfg.k;
  std::vector<MatrixD> fore(static_cast<std::size_t>(L + 1), MatrixD(rows, d));
  std::vector<MatrixD> label(static_cast<std::size_t>(L + 1), MatrixD(rows, d));
  std::vector<int> truth, shown;
  std::vector<std::vector<double>> copy(static_cast<std::size_t>(L));
  HeadCounts fr_counts;
  DetectorConfig dc;
  dc.multiplier = cfg.multiplier;
  run_stage("trace", [&] {
    for (int i = 0; i < n; ++i) {
      const auto b = capture(ctx.model, inputs[static_cast<std::size_t>(i)]);
      for (int j = 0; j < cfg.k; ++j) {
        const int r = i * cfg.k + j;
        for (int l = 0; l <= L; ++l) {
          const Matrix& h = b.trace.hidden[static_cast<std::size_t>(l)];
          fore[static_cast<std::size_t>(l)].row(r) = h.row(b.input.forerunner_pos(j)).cast<double>();
          label[static_cast<std::size_t>(l)].row(r) = h.row(b.input.label_pos(j)).cast<double>();
        }
        truth.push_back(b.input.demo_truth[static_cast<std::size_t>(j)]);
        shown.push_back(b.input.demo_shown[static_cast<std::size_t>(j)]);
      }
      for (int l = 0; l < L; ++l) copy[static_cast<std::size_t>(l)].push_back(copy_magnitude(b, l));
      fr_counts += mark_forerunner_heads(b, dc);
    }
  });
  const int K = detail::default_K(cfg, rows);
  const int n_train_rows = detail::default_n_train(cfg, n) * cfg.k;
  const std::vector<int> truth_train(truth.begin(), truth.begin() + n_train_rows);
  const std::vector<int> shown_train(shown.begin(), shown.begin() + n_train_rows);
  CsvTable t({{"layer", ColumnType::integer},
              {"ka_mean", ColumnType::real},
              {"ka_std", ColumnType::real},
              {"copy_magnitude", ColumnType::real},
              {"forerunner_heads", ColumnType::real},
              {"forerunner_probe_on_label", ColumnType::real},
              {"label_probe_on_label", ColumnType::real},
              {"K", ColumnType::integer}});
  for (int l : ctx.layers(0, L - 1)) {
    const auto ka = run_stage("kernel-alignment", [&] {
      return kernel_alignment(similarity_map(fore[static_cast<std::size_t>(l)]),
                              similarity_map(label[static_cast<std::size_t>(l + 1)]), {K});
    });
    long heads = 0;
    for (int h = 0; h < ctx.model.config.n_heads; ++h) heads += fr_counts.get({l, h});
    const auto& F = fore[static_cast<std::size_t>(l)];
    const auto& Y = label[static_cast<std::size_t>(l)];
    const auto cs = train_centroids(MatrixD(F.topRows(n_train_rows)), truth_train, ctx.tmpl.n_labels());
    const auto cy = train_centroids(MatrixD(Y.topRows(n_train_rows)), shown_train, ctx.tmpl.n_labels());
    int cs_ok = 0, cy_ok = 0;
    for (int r = n_train_rows; r < rows; ++r) {
      if (centroid_predict(cs, Y.row(r).transpose()) == truth[static_cast<std::size_t>(r)]) ++cs_ok;
      if (centroid_predict(cy, Y.row(r).transpose()) == shown[static_cast<std::size_t>(r)]) ++cy_ok;
    }
    const double n_test = rows - n_train_rows;
    t.add({cell(l), cell(ka.mean), cell(ka.std), cell(detail::mean(copy[static_cast<std::size_t>(l)])),
           cell(static_cast<double>(heads) / n), cell(cs_ok / n_test), cell(cy_ok / n_test), cell(K)});
  }
  detail::emit(rep, "merge_curve.csv", t);
}

inline void run_induction_curve(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const int L = ctx.n_layers();
  const int H = ctx.model.config.n_heads;
  DetectorConfig dc;
  dc.multiplier = cfg.multiplier;
  CsvTable curve({{"dataset", ColumnType::text},
                  {"layer", ColumnType::integer},
                  {"forerunner_heads", ColumnType::real},
                  {"induction_heads", ColumnType::real},
                  {"correct_induction_heads", ColumnType::real},
                  {"cla_vanilla", ColumnType::real, true},
                  {"cla_head_average", ColumnType::real, true},
                  {"cla_best_head", ColumnType::real, true}});
  CsvTable heads({{"layer", ColumnType::integer},
                  {"head", ColumnType::integer},
                  {"dataset", ColumnType::text},
                  {"label_mode", ColumnType::text},
                  {"forerunner", ColumnType::integer},
                  {"induction", ColumnType::integer},
                  {"correct_induction", ColumnType::integer}});
  struct PerDataset {
    std::string name;
    HeadCounts fr, ind, cor;
  };
  std::vector<PerDataset> all;
  const auto layers = ctx.layers(0, L - 1);
  for (const auto& ds : ctx.datasets) {
    const auto inputs = run_stage("inputs", [&] {
      return make_experiment_inputs(ctx, ds.examples, ctx.tmpl, cfg.k, cfg.n_queries);
    });
    PerDataset pd{ds.name, {}, {}, {}};
    std::map<std::pair<int, ClaVariant>, std::vector<double>> cla_vals;
    run_stage("detect", [&] {
      for (const auto& in : inputs) {
        const auto b = capture(ctx.model, in);
        pd.fr += mark_forerunner_heads(b, dc);
        const auto ic = mark_induction_heads(b, dc);
        pd.ind += ic.induction;
        pd.cor += ic.correct;
        for (int l : layers)
          for (auto v : {ClaVariant::vanilla, ClaVariant::head_average, ClaVariant::best_head})
            if (auto c = cla(b, l, v)) cla_vals[{l, v}].push_back(*c);
      }
    });
    const double n = static_cast<double>(inputs.size());
    for (int l : layers) {
      long f = 0, i = 0, c = 0;
      for (int h = 0; h < H; ++h) {
        f += pd.fr.get({l, h});
        i += pd.ind.get({l, h});
        c += pd.cor.get({l, h});
        heads.add({cell(l), cell(h), cell(ds.name), cell(perturbation_name(cfg.label_mode)), cell(pd.fr.get({l, h})),
                   cell(pd.ind.get({l, h})), cell(pd.cor.get({l, h}))});
      }
      auto mean_or_null = [&](ClaVariant v) -> std::optional<double> {
        auto it = cla_vals.find({l, v});
        if (it == cla_vals.end() || it->second.empty()) return std::nullopt;
        return detail::mean(it->second);
      };
      curve.add({cell(ds.name), cell(l), cell(f / n), cell(i / n), cell(c / n), cell(mean_or_null(ClaVariant::vanilla)),
                 cell(mean_or_null(ClaVariant::head_average)), cell(mean_or_null(ClaVariant::best_head))});
    }
    all.push_back(std::move(pd));
  }
  detail::emit(rep, "induction_curve.csv", curve);
  detail::emit(rep, "head_counts.csv", heads);
  if (all.size() >= 2) {
    CsvTable ov({{"dataset_a", ColumnType::text},
                 {"dataset_b", ColumnType::text},
                 {"counter", ColumnType::text},
                 {"overlap", ColumnType::real, true}});
    for (std::size_t a = 0; a < all.size(); ++a) {
      for (std::size_t b = a + 1; b < all.size(); ++b) {
        const std::pair<const char*, std::pair<const HeadCounts*, const HeadCounts*>> counters[] = {
            {"forerunner", {&all[a].fr, &all[b].fr}},
            {"induction", {&all[a].ind, &all[b].ind}},
            {"correct_induction", {&all[a].cor, &all[b].cor}}};
        for (const auto& [name, pair] : counters) {
          std::optional<double> s;
          try {
            s = overlap_rate(*pair.first, *pair.second);
          } catch (const UndefinedMetric&) {
          }
          ov.add({cell(all[a].name), cell(all[b].name), cell(name), cell(s)});
        }
      }
    }
    detail::emit(rep, "overlap.csv", ov);
  }
  (void)L;
}

inline void run_subspace(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  if (cfg.k < 1) throw ConfigError("subspace needs k >= 1");
  if (cfg.target_label < 0 || cfg.target_label >= ctx.tmpl.n_labels()) throw ConfigError("target_label outside the label space");
  HeadId head;
  if (cfg.head) {
    head = *cfg.head;
    if (head.layer < 0 || head.layer >= ctx.n_layers() || head.head < 0 || head.head >= ctx.model.config.n_heads) {
      throw ConfigError("head out of range");
    }
  } else {
    head = run_stage("detect", [&] {
      HeadCounts cor;
      DetectorConfig dc;
      dc.multiplier = cfg.multiplier;
      for (const auto& in : inputs) cor += mark_induction_heads(capture(ctx.model, in), dc).correct;
      HeadId best{0, 0};
      int best_n = -1;
      for (const auto& [h, c] : cor.counts)
        if (c > best_n) best = h, best_n = c;
      return best;
    });
  }
  const int n = static_cast<int>(inputs.size());
  MatrixD reps(n * cfg.k, ctx.model.config.d_model);
  std::vector<bool> correct;
  std::vector<int> shown;
  MatrixD queries(n, ctx.model.config.d_model);
  run_stage("trace", [&] {
    ForwardOptions fo;
    fo.record_attention = false;
    fo.compute_logits = false;
    for (int i = 0; i < n; ++i) {
      const auto& in = inputs[static_cast<std::size_t>(i)];
      const auto tr = forward(ctx.model, in.tokens, {}, fo);
      const Matrix& h = tr.hidden[static_cast<std::size_t>(head.layer)];
      for (int j = 0; j < cfg.k; ++j) {
        reps.row(i * cfg.k + j) = h.row(in.label_pos(j)).cast<double>();
        const int y = in.demo_shown[static_cast<std::size_t>(j)];
        shown.push_back(y);
        correct.push_back(y == cfg.target_label);
      }
      queries.row(i) = h.row(in.query_forerunner_pos()).cast<double>();
    }
  });
  const MatrixD keys = detail::block_input_norm(ctx.model, head.layer, reps);
  const MatrixD qs = detail::block_input_norm(ctx.model, head.layer, queries);
  const auto sp = run_stage("subspace", [&] { return subspace_project(qk_kernel(ctx.model, head.layer, head.head), keys, correct, head); });
  const auto grid = run_stage("grid", [&] { return att_assign_grid(sp, cfg.grid_resolution); });
  nlohmann::json j;
  j["head"] = {head.layer, head.head};
  j["target_label"] = cfg.target_label;
  j["one_dimensional"] = sp.one_dimensional;
  j["explained"] = {sp.explained(0), sp.explained(1)};
  j["zero_point"] = {sp.zero_point(0), sp.zero_point(1)};
  nlohmann::json pts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < sp.points.rows(); ++i) {
    pts.push_back({{"x", sp.points(i, 0)},
                   {"y", sp.points(i, 1)},
                   {"label", shown[static_cast<std::size_t>(i)]},
                   {"correct", static_cast<bool>(correct[static_cast<std::size_t>(i)])}});
  }
  j["points"] = pts;
  nlohmann::json qj = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    qj.push_back({{"query_id", inputs[static_cast<std::size_t>(i)].query.id},
                  {"truth", inputs[static_cast<std::size_t>(i)].query_truth},
                  {"att_assign", sp.att_assign(qs.row(i).transpose())}});
  }
  j["queries"] = qj;
  nlohmann::json gm = nlohmann::json::array();
  for (Eigen::Index r = 0; r < grid.values.rows(); ++r) {
    std::vector<double> row(grid.values.cols());
    for (Eigen::Index c = 0; c < grid.values.cols(); ++c) row[static_cast<std::size_t>(c)] = grid.values(r, c);
    gm.push_back(row);
  }
  j["grid"] = {{"xs", grid.xs}, {"ys", grid.ys}, {"values", gm}};
  detail::emit(rep, "subspace.json", j);
  rep.summary["head"] = {head.layer, head.head};
}

inline void run_ablation_kind(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  std::vector<std::string> kinds = cfg.edge_kinds;
  if (kinds.empty()) {
    for (auto k : {EdgeKind::DemoTextToForerunner, EdgeKind::QueryTextToForerunner, EdgeKind::DemoForerunnerToLabel,
                   EdgeKind::LabelToQueryForerunner, EdgeKind::ForerunnerToForerunner})
      kinds.push_back(edge_kind_name(k));
  }
  const std::uint64_t control_base = ctx.rng();
  CsvTable t({{"kind", ColumnType::text},
              {"fraction", ColumnType::real},
              {"layers", ColumnType::integer},
              {"accuracy", ColumnType::real},
              {"delta", ColumnType::real},
              {"ctrl_mean", ColumnType::real},
              {"ctrl_std", ColumnType::real},
              {"baseline", ColumnType::real},
              {"n", ColumnType::integer}});
  for (const auto& ks : kinds) {
    const auto res = run_stage("ablate " + ks, [&] {
      return run_ablation(ctx.model, inputs, parse_edge_kind(ks), cfg.fractions, cfg.control_seeds, control_base,
                          cfg.intervention_mode);
    });
    for (const auto& fr : res.fractions) {
      t.add({cell(ks), cell(fr.fraction), cell(fr.layers), cell(fr.accuracy), cell(fr.delta), cell(fr.control_mean),
             cell(fr.control_std), cell(res.baseline), cell(inputs.size())});
    }
  }
  detail::emit(rep, "ablation.csv", t);
}

inline void run_ncm(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const int H = ctx.model.config.n_heads;
  const auto layers = ctx.layers(0, ctx.n_layers() - 1);
  std::map<HeadId, NcmValues> acc;
  run_stage("trace", [&] {
    for (const auto& in : inputs) {
      const auto b = capture(ctx.model, in);
      for (int l : layers) {
        const auto v = ncm(b, l);
        for (int h = 0; h < H; ++h) {
          auto& dst = acc[{l, h}];
          dst.label.insert(dst.label.end(), v[static_cast<std::size_t>(h)].label.begin(), v[static_cast<std::size_t>(h)].label.end());
          dst.non_label.insert(dst.non_label.end(), v[static_cast<std::size_t>(h)].non_label.begin(),
                               v[static_cast<std::size_t>(h)].non_label.end());
        }
      }
    }
  });
  CsvTable t({{"layer", ColumnType::integer},
              {"head", ColumnType::integer},
              {"label_mean", ColumnType::real},
              {"label_std", ColumnType::real},
              {"non_label_mean", ColumnType::real},
              {"non_label_std", ColumnType::real},
              {"n_label", ColumnType::integer},
              {"n_non_label", ColumnType::integer},
              {"ks_statistic", ColumnType::real, true},
              {"ks_p_value", ColumnType::real, true}});
  for (const auto& [h, v] : acc) {
    std::optional<double> d, p;
    if (!v.label.empty() && !v.non_label.empty()) {
      const auto ks = ks_two_sample(v.label, v.non_label);
      d = ks.statistic;
      p = ks.p_value;
    }
    t.add({cell(h.layer), cell(h.head), cell(detail::mean(v.label)), cell(detail::pop_std(v.label)),
           cell(detail::mean(v.non_label)), cell(detail::pop_std(v.non_label)), cell(v.label.size()),
           cell(v.non_label.size()), cell(d), cell(p)});
  }
  detail::emit(rep, "ncm.csv", t);
}

inline void run_direct_decode(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const auto layers = ctx.layers(0, ctx.n_layers());
  const std::string cf_text = ctx.tmpl.forerunner_from_text ? " N/A" : "";
  std::map<int, int> ok, ok_cal;
  nlohmann::json dump = nlohmann::json::array();
  run_stage("decode", [&] {
    for (const auto& in : inputs) {
      const auto b = capture(ctx.model, in, {}, false);
      const auto cf = capture(ctx.model, content_free_input(ctx.tokenizer, in, cf_text), {}, false);
      nlohmann::json per = nlohmann::json::array();
      for (int l : layers) {
        const auto p = direct_decode(ctx.model, b, l);
        const auto pc = contextual_calibrate(p, direct_decode(ctx.model, cf, l));
        ok[l] += p.label == in.query_truth;
        ok_cal[l] += pc.label == in.query_truth;
        per.push_back({{"layer", l}, {"label", p.label}, {"dist", p.dist}, {"calibrated_label", pc.label}});
      }
      dump.push_back({{"query_id", in.query.id}, {"truth", in.query_truth}, {"layers", per}});
    }
  });
  CsvTable t({{"layer", ColumnType::integer},
              {"accuracy", ColumnType::real},
              {"calibrated_accuracy", ColumnType::real},
              {"n", ColumnType::integer}});
  const double n = static_cast<double>(inputs.size());
  for (int l : layers) t.add({cell(l), cell(ok[l] / n), cell(ok_cal[l] / n), cell(inputs.size())});
  detail::emit(rep, "direct_decode.csv", t);
  detail::emit(rep, "predictions.json", dump);
}

inline void run_js_divergence(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const int H = ctx.model.config.n_heads;
  const auto layers = ctx.layers(0, ctx.n_layers() - 1);
  std::map<HeadId, std::vector<double>> js;
  run_stage("trace", [&] {
    for (const auto& in : inputs) {
      const auto b = capture(ctx.model, in);
      const auto model_dist = icl_predict(b).dist;
      for (int l : layers)
        for (int h = 0; h < H; ++h) js[{l, h}].push_back(js_divergence(induction_predicted_output(b, {l, h}), model_dist));
    }
  });
  std::map<HeadId, double> means;
  for (const auto& [h, v] : js) means[h] = detail::mean(v);
  std::map<HeadId, int> rank;
  for (const auto& [h, v] : lowest_per_layer(means, H)) {
    int r = 1;
    for (const auto& [h2, _] : rank)
      if (h2.layer == h.layer) ++r;
    rank[h] = r;
  }
  CsvTable t({{"layer", ColumnType::integer},
              {"head", ColumnType::integer},
              {"js_mean", ColumnType::real},
              {"rank_in_layer", ColumnType::integer},
              {"lowest5", ColumnType::integer}});
  for (const auto& [h, m] : means) t.add({cell(h.layer), cell(h.head), cell(m), cell(rank[h]), cell(rank[h] <= 5 ? 1 : 0)});
  detail::emit(rep, "js_divergence.csv", t);
}

inline void run_template_ablation(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto base = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  auto acc_for = [&](const Template& tmpl) {
    std::vector<IclInput> inputs;
    for (const auto& in : base) {
      auto rebuilt = build_icl_input_shown(ctx.tokenizer, in.demos, in.query, tmpl, in.options, in.demo_shown, in.abstract_labels);
      if (rebuilt.size() > ctx.model.config.max_seq) throw ConfigError("modified prompt exceeds max_seq");
      inputs.push_back(std::move(rebuilt));
    }
    return accuracy(ctx.model, inputs, [](const IclInput&, std::size_t) { return InterventionSpec{}; });
  };
  CsvTable t({{"modification", ColumnType::text},
              {"accuracy", ColumnType::real},
              {"delta", ColumnType::real},
              {"n", ColumnType::integer}});
  const double baseline = run_stage("baseline", [&] { return acc_for(ctx.tmpl); });
  t.add({cell("none"), cell(baseline), cell(0.0), cell(base.size())});
  for (const auto& m : cfg.modifications) {
    const auto mod = TemplateModification::parse(m);
    const double a = run_stage("template " + m, [&] { return acc_for(modify_template(ctx.tokenizer, ctx.tmpl, mod)); });
    t.add({cell(mod.str()), cell(a), cell(a - baseline), cell(base.size())});
  }
  detail::emit(rep, "template_ablation.csv", t);
}

inline void run_early_exit(ExperimentContext& ctx, ExperimentReport& rep) {
  const auto& cfg = ctx.config;
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  const int n = static_cast<int>(inputs.size());
  const int n_train = detail::default_n_train(cfg, n);
  const auto y = detail::query_truths(inputs);
  const auto split = detail::stratified_split(y, n_train, ctx.tmpl.n_labels());
  const auto y_train = detail::pick(y, split.train);
  const auto train = detail::pick(inputs, split.train);
  const auto test = detail::pick(inputs, split.test);
  const auto train_reps = run_stage("trace", [&] {
    return detail::collect_role(ctx.model, train, RoleRef{Role::query_forerunner, -1}, Pooling::last);
  });
  int lm_ok = 0;
  for (const auto& in : test) lm_ok += icl_predict(ctx.model, in).label == in.query_truth;
  const double lm_acc = static_cast<double>(lm_ok) / static_cast<double>(test.size());
  CsvTable t({{"layer", ColumnType::integer},
              {"centroid_accuracy", ColumnType::real},
              {"lm_head_accuracy", ColumnType::real},
              {"params_used", ColumnType::integer},
              {"params_full", ColumnType::integer},
              {"n_train", ColumnType::integer},
              {"n_test", ColumnType::integer}});
  nlohmann::json timing = nlohmann::json::array();
  for (int l : ctx.layers(0, ctx.n_layers())) {
    auto cm = train_centroids(train_reps[static_cast<std::size_t>(l)], y_train, ctx.tmpl.n_labels());
    cm.layer = l;
    cm.role = "query_forerunner";
    int ok = 0;
    run_stage("early-exit", [&] {
      for (const auto& in : test) ok += early_exit_classify(ctx.model, in, l, cm).label == in.query_truth;
    });
    const auto cost = early_exit_cost(ctx.model, test, l);
    t.add({cell(l), cell(static_cast<double>(ok) / static_cast<double>(test.size())), cell(lm_acc),
           cell(static_cast<long long>(cost.params_used)), cell(static_cast<long long>(cost.params_full)), cell(n_train),
           cell(test.size())});
    timing.push_back({{"layer", l},
                      {"truncated_seconds", cost.truncated_seconds},
                      {"full_seconds", cost.full_seconds},
                      {"wall_ratio", cost.wall_ratio}});
  }
  detail::emit(rep, "early_exit.csv", t);
  // Wall-clock numbers vary between runs, so they stay out of the CSV.
  detail::emit(rep, "timing.json", timing);
}

// ---------------------------------------------------------------------------
// Entry points

inline nlohmann::json run_manifest(const ExperimentContext& ctx, const ExperimentReport& rep) {
  const nlohmann::json cfg = to_json(ctx.config);
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& f : rep.files) {
    std::ifstream in(rep.out_dir / f, std::ios::binary);
    const std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    outputs.push_back({{"file", f}, {"fnv1a", hex64(fnv1a(body))}, {"bytes", body.size()}});
  }
  nlohmann::json model_cfg;
  to_json(model_cfg, ctx.model.config);
  return {{"kind", rep.kind},
          {"config", cfg},
          {"config_hash", hex64(fnv1a(cfg.dump()))},
          {"model_tag", ctx.model.config.tag},
          {"model_config", model_cfg},
          {"seed", ctx.config.seed},
          {"versions",
           {{"iclc", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
          {"outputs", outputs},
          {"summary", rep.summary}};
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  validate_config(cfg);
  ExperimentContext ctx = open_context(cfg);
  ExperimentReport rep;
  rep.kind = cfg.kind;
  rep.out_dir = cfg.out;
  std::error_code ec;
  fs::create_directories(rep.out_dir, ec);
  if (ec) throw Error("cannot create output directory " + rep.out_dir.string() + ": " + ec.message());
  const std::string& k = cfg.kind;
  if (k == "encode-curve") run_encode_curve(ctx, rep);
  else if (k == "centroid-curve") run_centroid_curve(ctx, rep);
  else if (k == "position-grid") run_position_grid(ctx, rep);
  else if (k == "merge-curve") run_merge_curve(ctx, rep);
  else if (k == "induction-curve") run_induction_curve(ctx, rep);
  else if (k == "subspace") run_subspace(ctx, rep);
  else if (k == "ablation") run_ablation_kind(ctx, rep);
  else if (k == "ncm") run_ncm(ctx, rep);
  else if (k == "direct-decode") run_direct_decode(ctx, rep);
  else if (k == "js-divergence") run_js_divergence(ctx, rep);
  else if (k == "template-ablation") run_template_ablation(ctx, rep);
  else if (k == "early-exit") run_early_exit(ctx, rep);
  detail::write_text(rep.out_dir / "manifest.json", run_manifest(ctx, rep).dump(2) + "\n");
  return rep;
}

// Writes the k-shot inputs of a config as JSON lines.
inline std::string build_prompts(const ExperimentConfig& cfg, const std::string& path) {
  validate_config(cfg, false);
  ExperimentContext ctx = open_context(cfg);
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  std::string body;
  for (const auto& in : inputs) {
    nlohmann::json j = in;
    j["text"] = prompt_text(in);
    body += j.dump() + "\n";
  }
  detail::write_text(path, body);
  return path;
}

// Captures and saves one trace bundle per input: trace_<i>.bin/.json.
inline std::vector<std::string> trace_inputs(const ExperimentConfig& cfg, const std::string& dir,
                                             const SaveOptions& opts = {}) {
  validate_config(cfg, false);
  ExperimentContext ctx = open_context(cfg);
  const auto inputs = run_stage("inputs", [&] { return make_experiment_inputs(ctx); });
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  run_stage("trace", [&] {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      nlohmann::json manifest{{"seed", cfg.seed}, {"index", i}, {"label_mode", perturbation_name(cfg.label_mode)}};
      const auto b = capture(ctx.model, inputs[i], {}, opts.with_attention, manifest);
      const std::string name = "trace_" + std::to_string(i);
      save_bundle(b, dir, name, opts);
      names.push_back(name);
    }
  });
  return names;
}

}  // namespace iclc
