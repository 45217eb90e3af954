// Acceptance gate: one PASS/FAIL line per primary criterion, nonzero exit on any failure.
//
// The real-model check reads tests/data/tiny-sentiment-lm unless ICLC_REAL_MODEL
// names another checkpoint directory (model.safetensors, config.json, vocab.json,
// merges.txt, template.json, dataset.jsonl).

#include "iclc/iclc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace iclc;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

bool same_trace(const ForwardTrace& a, const ForwardTrace& b) {
  if (a.hidden.size() != b.hidden.size() || a.attn.size() != b.attn.size()) return false;
  for (std::size_t l = 0; l < a.hidden.size(); ++l)
    if (!same_bits(a.hidden[l], b.hidden[l])) return false;
  for (std::size_t l = 0; l < a.attn.size(); ++l) {
    if (a.attn[l].size() != b.attn[l].size()) return false;
    for (std::size_t h = 0; h < a.attn[l].size(); ++h)
      if (!same_bits(a.attn[l][h], b.attn[l][h])) return false;
  }
  return same_bits(a.logits, b.logits);
}

const fixture::Fixture& fx() {
  static const fixture::Fixture f = fixture::build();
  return f;
}

std::vector<IclInput> fixture_inputs(int n, int k, std::uint64_t seed) {
  const auto pool = fixture::make_dataset(256, seed);
  const auto queries = fixture::make_dataset(n, seed + 1000);
  return fixture::make_inputs(fx(), pool, queries, k, seed);
}

std::string real_model_dir() {
  if (const char* env = std::getenv("ICLC_REAL_MODEL")) return env;
  return std::string(ICLC_TEST_DATA) + "/tiny-sentiment-lm";
}

// Random-weight model of a given architecture sized for the fixture vocabulary.
Model random_model(NormKind norm, PosKind pos, MlpKind mlp, const std::string& layout, std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_head = 8;
  c.d_ff = 32;
  c.vocab_size = fx().model.config.vocab_size;
  c.max_seq = fixture::kMaxSeq;
  c.norm_kind = norm;
  c.pos_kind = pos;
  c.mlp_kind = mlp;
  c.bias = layout == "gpt2";
  c.layout = layout;
  c.tie_embeddings = false;
  c.tag = "random-" + layout;
  c.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> N(0.0f, 1.0f);
  auto mat = [&](int r, int cc, float s) {
    Matrix m(r, cc);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * N(rng);
    return m;
  };
  auto vec = [&](int n, float s, float off) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = off + s * N(rng);
    return v;
  };
  auto nrm = [&] {
    NormWeights w;
    w.weight = vec(c.d_model, 0.2f, 1.0f);
    if (norm == NormKind::layernorm) w.bias = vec(c.d_model, 0.1f, 0.0f);
    return w;
  };
  Model m;
  m.config = c;
  m.token_embedding = mat(c.vocab_size, c.d_model, 1.0f);
  if (pos == PosKind::learned) m.position_embedding = mat(c.max_seq, c.d_model, 0.5f);
  for (int l = 0; l < c.n_layers; ++l) {
    Block b;
    b.ln_attn = nrm();
    b.ln_mlp = nrm();
    b.attn.wq = mat(c.d_model, c.d_model, 0.4f);
    b.attn.wk = mat(c.d_model, c.d_model, 0.4f);
    b.attn.wv = mat(c.d_model, c.d_model, 0.4f);
    b.attn.wo = mat(c.d_model, c.d_model, 0.4f);
    if (c.bias) {
      b.attn.bq = vec(c.d_model, 0.1f, 0.0f);
      b.attn.bk = vec(c.d_model, 0.1f, 0.0f);
      b.attn.bv = vec(c.d_model, 0.1f, 0.0f);
      b.attn.bo = vec(c.d_model, 0.1f, 0.0f);
    }
    b.mlp.w_in = mat(c.d_model, c.d_ff, 0.4f);
    b.mlp.w_out = mat(c.d_ff, c.d_model, 0.4f);
    if (mlp == MlpKind::silu_gated) b.mlp.w_gate = mat(c.d_model, c.d_ff, 0.4f);
    if (c.bias && mlp == MlpKind::gelu) {
      b.mlp.b_in = vec(c.d_ff, 0.1f, 0.0f);
      b.mlp.b_out = vec(c.d_model, 0.1f, 0.0f);
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = nrm();
  m.unembedding = mat(c.d_model, c.vocab_size, 0.5f);
  return m;
}

// ---------------------------------------------------------------------------
// 1. Kernel alignment

// Top-K set by a full sort on (value descending, index ascending).
std::vector<int> sorted_top_k(const MatrixD& s, int row, int K) {
  std::vector<int> idx(static_cast<std::size_t>(s.cols()));
  for (int j = 0; j < s.cols(); ++j) idx[static_cast<std::size_t>(j)] = j;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s(row, a) > s(row, b); });
  idx.resize(static_cast<std::size_t>(K));
  return idx;
}

double ka_oracle(const SimMap& a, const SimMap& b, int K, std::vector<double>& per_row) {
  per_row.clear();
  double total = 0.0;
  for (int i = 0; i < a.n(); ++i) {
    const auto ta = sorted_top_k(a.s, i, K);
    const std::set<int> tb_set = [&] {
      const auto tb = sorted_top_k(b.s, i, K);
      return std::set<int>(tb.begin(), tb.end());
    }();
    int common = 0;
    for (int j : ta) common += tb_set.count(j) ? 1 : 0;
    per_row.push_back(static_cast<double>(common) / K);
    total += per_row.back();
  }
  return total / a.n();
}

Outcome criterion_kernel_alignment() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_int_distribution<int> Q(-2, 2);
  auto reps = [&](int n, int d, bool quantized) {
    MatrixD m(n, d);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) m(i, j) = quantized ? Q(rng) : N(rng);
      if (m.row(i).norm() == 0.0) m(i, 0) = 1.0;
    }
    return m;
  };
  int mismatches = 0;
  for (int p = 0; p < 50; ++p) {
    const int n = 2 + static_cast<int>(rng() % 63);
    const int K = 1 + static_cast<int>(rng() % static_cast<unsigned>(n - 1));
    const bool quantized = p % 2 == 0;  // low-resolution entries force ties
    const auto a = similarity_map(reps(n, 4, quantized));
    const auto b = similarity_map(reps(n, 4, quantized));
    const auto ka = kernel_alignment(a, b, {K});
    std::vector<double> rows;
    const double mean = ka_oracle(a, b, K, rows);
    if (rows != ka.scores || std::abs(mean - ka.mean) > 1e-12) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + "/50 pairs differ from the oracle");
  const auto a = similarity_map(reps(512, 64, false));
  const auto b = similarity_map(reps(512, 64, false));
  const double random_ka = kernel_alignment(a, b, {64}).mean;
  o.require(std::abs(random_ka - 0.125) <= 0.02, "random KA " + fmt("%.4f", random_ka));
  const double secs = seconds_since(t0);
  o.require(secs < 10.0, "runtime " + fmt("%.2f", secs) + " s");
  o.detail = "50/50 pairs exact, random KA " + fmt("%.4f", random_ka) + ", " + fmt("%.2f", secs) + " s" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Centroid probe

Outcome criterion_centroid() {
  Outcome o;
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> coord(-4, 4);  // integer grid produces exact distance ties
  int points = 0;
  int disagree = 0;
  for (int n_labels = 2; n_labels <= 6; ++n_labels) {
    const int n = 200;
    MatrixD reps(n, 3);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = i < n_labels ? i : static_cast<int>(rng() % static_cast<unsigned>(n_labels));
      for (int d = 0; d < 3; ++d) reps(i, d) = coord(rng);
    }
    const auto cm = train_centroids(reps, labels, n_labels);
    // Brute force: recompute means, scan every label, keep the first minimum.
    std::vector<std::array<double, 3>> cent(static_cast<std::size_t>(n_labels), {0, 0, 0});
    std::vector<int> cnt(static_cast<std::size_t>(n_labels), 0);
    for (int i = 0; i < n; ++i) {
      auto& c = cent[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      for (int d = 0; d < 3; ++d) c[static_cast<std::size_t>(d)] += reps(i, d);
      ++cnt[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (int y = 0; y < n_labels; ++y)
      for (auto& v : cent[static_cast<std::size_t>(y)]) v /= cnt[static_cast<std::size_t>(y)];
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = 0;
      for (int y = 0; y < n_labels; ++y) {
        double d2 = 0;
        for (int d = 0; d < 3; ++d) {
          const double diff = reps(i, d) - cent[static_cast<std::size_t>(y)][static_cast<std::size_t>(d)];
          d2 += diff * diff;
        }
        if (y == 0 || d2 < best_d) {
          best = y;
          best_d = d2;
        }
      }
      if (centroid_predict(cm, reps.row(i).transpose()) != best) ++disagree;
      ++points;
    }
  }
  o.require(disagree == 0, std::to_string(disagree) + " disagreements");
  o.detail = std::to_string(points - disagree) + "/" + std::to_string(points) + " agree" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Synthetic induction fixture

Outcome criterion_fixture() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto& f = fx();
  const auto inputs = fixture_inputs(200, 4, 303);
  const int n = static_cast<int>(inputs.size());
  int forerunner_hits = 0;
  int induction_hits = 0;
  double min_cla = 1.0;
  int argmax_match = 0;
  double js_sum = 0.0;
  for (const auto& in : inputs) {
    const auto b = capture(f.model, in);
    const auto fh = mark_forerunner_heads(b);
    const int n_label_positions = static_cast<int>(in.label_positions().size());
    if (fh.get(fixture::Fixture::previous_token_head) == n_label_positions) ++forerunner_hits;
    const auto ih = mark_induction_heads(b);
    const auto cla_best = cla(b, fixture::Fixture::induction_head.layer, ClaVariant::best_head);
    if (ih.correct.get(fixture::Fixture::induction_head) == 1) ++induction_hits;
    min_cla = std::min(min_cla, cla_best.value_or(0.0));
    const auto ipo = induction_predicted_output(b, fixture::Fixture::induction_head);
    const auto model_dist = icl_predict(b).dist;
    if (argmax(ipo) == argmax(model_dist)) ++argmax_match;
    js_sum += js_divergence(ipo, model_dist);
  }
  const double fr_rate = static_cast<double>(forerunner_hits) / n;
  const double ind_rate = static_cast<double>(induction_hits) / n;
  const double match_rate = static_cast<double>(argmax_match) / n;
  const double js_mean = js_sum / n;
  o.require(fr_rate >= 0.95, "(a) forerunner head rate " + fmt("%.3f", fr_rate));
  o.require(ind_rate >= 0.95, "(b) correct induction rate " + fmt("%.3f", ind_rate));
  o.require(min_cla >= 0.9, "(b) best-head CLA " + fmt("%.3f", min_cla));
  o.require(match_rate >= 0.95, "(d) argmax match " + fmt("%.3f", match_rate));
  o.require(js_mean <= 0.1, "(d) mean JS " + fmt("%.4f", js_mean));

  const auto res = run_ablation(f.model, inputs, EdgeKind::LabelToQueryForerunner, {1.0}, 5, 17);
  const auto& fr = res.fractions.at(0);
  const double chance = 1.0 / f.tmpl.n_labels();
  o.require(fr.accuracy <= chance + 0.05, "(c) ablated accuracy " + fmt("%.3f", fr.accuracy));
  double worst_ctrl = 0.0;
  for (double a : fr.control_accuracy) worst_ctrl = std::max(worst_ctrl, std::abs(a - res.baseline));
  o.require(worst_ctrl <= 0.02, "(c) control deviation " + fmt("%.3f", worst_ctrl));
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + fmt("%.1f", secs) + " s");
  o.detail = "forerunner " + fmt("%.3f", fr_rate) + ", correct induction " + fmt("%.3f", ind_rate) + ", min CLA " +
             fmt("%.3f", min_cla) + ", baseline " + fmt("%.3f", res.baseline) + " -> ablated " +
             fmt("%.3f", fr.accuracy) + ", max control deviation " + fmt("%.3f", worst_ctrl) + ", argmax match " +
             fmt("%.3f", match_rate) + ", mean JS " + fmt("%.4f", js_mean) + ", " + fmt("%.1f", secs) + " s" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Intervention identity

Outcome criterion_identity(const std::vector<std::pair<std::string, Model>>& models,
                           const std::vector<std::vector<IclInput>>& inputs_per_model) {
  Outcome o;
  int checked = 0;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto& [name, model] = models[m];
    const auto& inputs = inputs_per_model[m];
    for (const auto& in : inputs) {
      const auto base = forward(model, in.tokens);
      for (auto mode : {InterventionMode::zero_post_softmax, InterventionMode::mask_pre_softmax}) {
        InterventionSpec empty;
        empty.mode = mode;
        if (!same_trace(base, forward(model, in.tokens, empty))) o.require(false, name + ": empty spec changed the trace");
      }
      ++checked;
    }
    // Fractions that round to zero layers leave every input untouched.
    const auto res = run_ablation(model, inputs, EdgeKind::DemoTextToForerunner, {1e-6, 0.5 / model.config.n_layers}, 2, 9);
    for (const auto& fr : res.fractions) {
      o.require(fr.layers == 0, name + ": fraction " + fmt("%g", fr.fraction) + " touched layers");
      o.require(fr.accuracy == res.baseline, name + ": fraction " + fmt("%g", fr.fraction) + " accuracy differs");
    }
  }
  o.detail = std::to_string(checked) + " inputs over " + std::to_string(models.size()) +
             " models bit-exact; near-zero fractions equal baseline" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 5. Direct decode and truncated forwards

Outcome criterion_direct_decode(const std::vector<std::pair<std::string, Model>>& models,
                                const std::vector<std::vector<IclInput>>& inputs_per_model) {
  Outcome o;
  double worst = 0.0;
  int decoded = 0;
  int prefixes = 0;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto& [name, model] = models[m];
    const int L = model.config.n_layers;
    for (const auto& in : inputs_per_model[m]) {
      const auto b = capture(model, in, {}, false);
      const auto dd = direct_decode(model, b, L);
      const auto lm = icl_predict(model, in);
      for (std::size_t y = 0; y < dd.dist.size(); ++y) {
        const double rel = std::abs(dd.dist[y] - lm.dist[y]) / std::max(std::abs(lm.dist[y]), 1e-30);
        worst = std::max(worst, rel);
      }
      if (dd.label != lm.label) o.require(false, name + ": direct-decode label differs");
      ++decoded;
      for (int c = 0; c <= L; ++c) {
        const auto tr = forward_truncated(model, in.tokens, c);
        for (int l = 0; l <= c; ++l) {
          if (!same_bits(tr[static_cast<std::size_t>(l)], b.trace.hidden[static_cast<std::size_t>(l)])) {
            o.require(false, name + ": truncated prefix differs at cutoff " + std::to_string(c));
          }
        }
        ++prefixes;
      }
    }
  }
  o.require(worst <= 1e-5, "max relative difference " + fmt("%.3g", worst));
  o.detail = std::to_string(decoded) + " inputs, max relative difference " + fmt("%.3g", worst) + ", " +
             std::to_string(prefixes) + " truncated forwards bit-exact" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Tokenizer round trip

std::string random_utf8(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(0, 40);
  std::uniform_int_distribution<int> plane(0, 9);
  std::string s;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    std::uint32_t cp;
    switch (plane(rng)) {
      case 0: cp = static_cast<std::uint32_t>(rng() % 0x80); break;  // includes control bytes
      case 1: cp = static_cast<std::uint32_t>(' '); break;
      case 2: cp = static_cast<std::uint32_t>('\n'); break;
      case 3: cp = 0x80 + static_cast<std::uint32_t>(rng() % 0x780); break;
      case 4: cp = 0x800 + static_cast<std::uint32_t>(rng() % 0x7800); break;  // below the surrogates
      case 5: cp = 0xE000 + static_cast<std::uint32_t>(rng() % 0x2000); break;
      case 6: cp = 0x10000 + static_cast<std::uint32_t>(rng() % 0x100000); break;
      case 7: cp = static_cast<std::uint32_t>('\''); break;
      case 8: cp = static_cast<std::uint32_t>('0' + rng() % 10); break;
      default: cp = static_cast<std::uint32_t>('a' + rng() % 26); break;
    }
    detail::append_utf8(s, cp);
  }
  return s;
}

Outcome criterion_tokenizer() {
  Outcome o;
  std::vector<std::pair<std::string, Tokenizer>> toks = {{"fixture", fx().tokenizer}};
  std::vector<Template> templates = {fx().tmpl};
  std::vector<std::vector<LabeledExample>> datasets = {fixture::make_dataset(64, 3)};
  const std::string real = real_model_dir();
  if (fs::exists(real + "/vocab.json")) {
    toks.emplace_back("real", Tokenizer::load(real + "/vocab.json", real + "/merges.txt"));
    const auto t = load_template(real + "/template.json");
    templates.push_back(t);
    datasets.push_back(load_dataset(real + "/dataset.jsonl", t.labels));
  } else {
    o.require(false, "real tokenizer missing at " + real);
  }
  // Template corpus: every fragment and every modification of each template,
  // plus rendered prompts over each dataset.
  std::vector<std::string> corpus;
  for (std::size_t t = 0; t < templates.size(); ++t) {
    std::vector<Template> variants = {templates[t]};
    for (const char* m : {"drop-newline", "drop-colon", "drop-prefixes", "drop-all", "replace-colon(=)"})
      variants.push_back(modify_template(templates[t], TemplateModification::parse(m)));
    for (const auto& v : variants) {
      corpus.insert(corpus.end(), {v.input_prefix, v.forerunner, v.unit_suffix});
      for (const auto& w : v.label_verbalizer) corpus.push_back(w);
      for (const auto& ex : datasets[t]) {
        corpus.push_back(ex.text);
        corpus.push_back(v.input_prefix + ex.text + v.forerunner + v.label_verbalizer[0] + v.unit_suffix);
      }
    }
  }
  std::mt19937_64 rng(606);
  std::vector<std::string> random_strings;
  for (int i = 0; i < 1000; ++i) random_strings.push_back(random_utf8(rng));
  int total = 0;
  int failures = 0;
  for (const auto& [name, tok] : toks) {
    for (const auto* set : {&random_strings, &corpus}) {
      for (const auto& s : *set) {
        ++total;
        if (tok.decode(tok.encode(s)) != s) ++failures;
      }
    }
  }
  o.require(failures == 0, std::to_string(failures) + " strings failed to round-trip");
  o.detail = std::to_string(total - failures) + "/" + std::to_string(total) + " strings round-trip over " +
             std::to_string(toks.size()) + " tokenizers (" + std::to_string(random_strings.size()) + " random, " +
             std::to_string(corpus.size()) + " template corpus each)" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Small real model

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

Outcome criterion_real_model() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::string dir = real_model_dir();
  if (!fs::exists(dir + "/model.safetensors")) {
    o.require(false, "no checkpoint at " + dir);
    return o;
  }
  ExperimentConfig cfg;
  cfg.kind = "ablation";
  cfg.model = dir;
  cfg.k = 4;
  cfg.n_queries = 64;
  cfg.seed = 7;
  cfg.fractions = {1.0};
  cfg.edge_kinds = {edge_kind_name(EdgeKind::DemoTextToForerunner)};
  cfg.control_seeds = 5;
  cfg.out = (fs::temp_directory_path() / "iclc_acceptance_real").string();
  fs::remove_all(cfg.out);
  try {
    // End-to-end through the experiment runner, then the same inputs rebuilt
    // for the majority baseline.
    run_experiment(cfg);
    std::ifstream in(fs::path(cfg.out) / "ablation.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    const auto h = split_csv_line(header);
    const auto r = split_csv_line(row);
    auto col = [&](const std::string& name) {
      const auto it = std::find(h.begin(), h.end(), name);
      if (it == h.end()) throw Error("ablation.csv lacks column " + name);
      return std::stod(r.at(static_cast<std::size_t>(it - h.begin())));
    };
    const double baseline = col("baseline");
    const double ablated = col("accuracy");
    const double ctrl_delta = col("ctrl_mean");

    auto ctx = open_context(cfg);
    const auto inputs = make_experiment_inputs(ctx);
    std::vector<int> per_label(static_cast<std::size_t>(ctx.tmpl.n_labels()), 0);
    for (const auto& q : inputs) ++per_label[static_cast<std::size_t>(q.query_truth)];
    const double majority =
        static_cast<double>(*std::max_element(per_label.begin(), per_label.end())) / static_cast<double>(inputs.size());
    const double direct = accuracy(ctx.model, inputs, [](const IclInput&, std::size_t) { return InterventionSpec{}; });
    const double params = static_cast<double>(ctx.model.parameter_count(ctx.model.config.n_layers, true));

    const double drop = baseline - ablated;
    const double ctrl_drop = -ctrl_delta;
    o.require(params <= 200e6, "checkpoint has " + fmt("%.0f", params) + " parameters");
    o.require(direct == baseline, "runner baseline " + fmt("%.4f", baseline) + " != direct " + fmt("%.4f", direct));
    o.require(baseline > majority, "ICL accuracy " + fmt("%.3f", baseline) + " <= majority " + fmt("%.3f", majority));
    o.require(drop > 0.0 && drop > 3.0 * std::max(ctrl_drop, 0.0),
              "treatment drop " + fmt("%.3f", drop) + " vs control drop " + fmt("%.3f", ctrl_drop));
    const double secs = seconds_since(t0);
    o.require(secs < 1800.0, "runtime " + fmt("%.0f", secs) + " s");
    o.detail = fs::path(dir).filename().string() + " (" + fmt("%.0f", params) + " params): ICL " + fmt("%.3f", baseline) +
               " vs majority " + fmt("%.3f", majority) + ", demo-text->forerunner@1.0 drop " + fmt("%.3f", drop) +
               " vs control drop " + fmt("%.3f", ctrl_drop) + ", " + fmt("%.1f", secs) + " s" +
               (o.detail.empty() ? "" : " | " + o.detail);
  } catch (const std::exception& e) {
    o.require(false, std::string("pipeline error: ") + e.what());
  }
  return o;
}

// ---------------------------------------------------------------------------
// 8. Metric properties

Outcome criterion_properties() {
  Outcome o;
  constexpr double tol = 1e-9;
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  int violations = 0;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) {
      ++violations;
      o.require(false, what);
    }
  };
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(t % 6);
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = (t % 5 == 0 && i == 0) ? 0.0 : U(rng);
      q[i] = U(rng);
      sp += p[i];
      sq += q[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    const double pq = js_divergence(p, q);
    check(std::abs(pq - js_divergence(q, p)) <= tol, "JS asymmetric");
    check(std::abs(js_divergence(p, p)) <= tol, "JS(p, p) != 0");
    check(pq >= -tol && pq <= 1.0 + tol, "JS out of [0, 1]");
  }
  check(std::abs(js_divergence({1.0, 0.0}, {0.0, 1.0}) - 1.0) <= tol, "JS of disjoint supports != 1");

  for (int t = 0; t < 500; ++t) {
    HeadCounts a, b;
    for (int h = 0; h < 8; ++h) {
      a.add({h / 4, h % 4}, static_cast<int>(rng() % 20));
      b.add({h / 4, h % 4}, static_cast<int>(rng() % 20));
    }
    if (a.total() == 0 || b.total() == 0) continue;
    check(std::abs(overlap_rate(a, b) - overlap_rate(b, a)) <= tol, "overlap asymmetric");
    check(std::abs(overlap_rate(a, a) - 1.0) <= tol, "S(c, c) != 1");
  }

  for (int n_t = 1; n_t <= 2048; ++n_t) check(std::abs(ncm_value(1.0 / n_t, n_t) - 1.0) <= tol, "NCM uniform != 1");
  // Same property through the trace path: uniform attention over the earlier tokens.
  {
    const auto in = fixture_inputs(1, 4, 808)[0];
    TraceBundle b;
    b.input = in;
    const int T = in.size();
    Matrix a = Matrix::Zero(T, T);
    a(0, 0) = 1.0f;
    for (int i = 1; i < T; ++i)
      for (int j = 0; j < i; ++j) a(i, j) = static_cast<float>(1.0 / i);
    b.trace.attn = {{a}};
    for (const auto& v : ncm(b, 0)) {
      for (double x : v.label) check(std::abs(x - 1.0) <= 1e-6, "NCM uniform trace != 1");
      for (double x : v.non_label) check(std::abs(x - 1.0) <= 1e-6, "NCM uniform trace != 1");
    }
  }

  for (int t = 0; t < 50; ++t) {
    const int d = 4 + t % 5;
    const int n = 3 + t % 7;
    MatrixD W(d, d), K(n, d);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = N(rng);
    for (Eigen::Index i = 0; i < K.size(); ++i) K.data()[i] = N(rng);
    std::vector<bool> correct;
    for (int i = 0; i < n; ++i) correct.push_back(rng() % 2 == 0);
    const auto sp = subspace_project(W, K, correct);
    VectorD q1(d), q2(d);
    for (int i = 0; i < d; ++i) {
      q1(i) = N(rng);
      q2(i) = N(rng);
    }
    const double a = N(rng), c = N(rng);
    const double lhs = sp.att_assign(a * q1 + c * q2);
    const double rhs = a * sp.att_assign(q1) + c * sp.att_assign(q2);
    check(std::abs(lhs - rhs) <= tol * std::max(1.0, std::abs(rhs)), "AttAssign not linear in the query");
    // Linear in the keys: scaling every key scales the score.
    const auto scaled = subspace_project(W, MatrixD(2.5 * K), correct);
    check(std::abs(scaled.att_assign(q1) - 2.5 * sp.att_assign(q1)) <= tol * std::max(1.0, std::abs(sp.att_assign(q1))),
          "AttAssign not linear in the keys");
  }
  o.detail = violations == 0 ? "JS, overlap, NCM and AttAssign properties hold at 1e-9" : o.detail;
  return o;
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  // Models and inputs shared by the identity and decode checks.
  std::vector<std::pair<std::string, Model>> models;
  std::vector<std::vector<IclInput>> inputs;
  models.emplace_back("fixture", fx().model);
  inputs.push_back(fixture_inputs(100, 4, 404));
  const auto random_inputs = fixture_inputs(100, 4, 405);
  models.emplace_back("random-gpt2", random_model(NormKind::layernorm, PosKind::learned, MlpKind::gelu, "gpt2", 1));
  inputs.push_back(random_inputs);
  models.emplace_back("random-llama", random_model(NormKind::rmsnorm, PosKind::rotary, MlpKind::silu_gated, "llama", 2));
  inputs.push_back(random_inputs);
  try {
    ExperimentConfig cfg;
    cfg.model = real_model_dir();
    cfg.n_queries = 100;
    cfg.k = 4;
    cfg.seed = 5;
    auto ctx = open_context(cfg);
    models.emplace_back("real", ctx.model);
    inputs.push_back(make_experiment_inputs(ctx));
  } catch (const std::exception& e) {
    std::cerr << "note: real model unavailable for criteria 4-5: " << e.what() << "\n";
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "kernel-alignment oracle", criterion_kernel_alignment},
      {2, "centroid oracle", criterion_centroid},
      {3, "synthetic induction fixture", criterion_fixture},
      {4, "intervention identity", [&] { return criterion_identity(models, inputs); }},
      {5, "direct-decode consistency", [&] { return criterion_direct_decode(models, inputs); }},
      {6, "tokenizer round trip", criterion_tokenizer},
      {7, "small real model", criterion_real_model},
      {8, "metric properties", criterion_properties},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << " in "
            << fmt("%.1f", seconds_since(t0)) << " s" << std::endl;
  return failed == 0 ? 0 : 1;
}
