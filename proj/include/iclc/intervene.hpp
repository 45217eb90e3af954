#pragma once

// Role-based attention-edge ablations with layer-fraction schedules and
// random controls of matched size.

#include "iclc/errors.hpp"
#include "iclc/model.hpp"
#include "iclc/prompt.hpp"
#include "iclc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace iclc {

enum class EdgeKind {
  DemoTextToForerunner,
  QueryTextToForerunner,
  DemoForerunnerToLabel,
  LabelToQueryForerunner,
  ForerunnerToForerunner
};

inline const char* edge_kind_name(EdgeKind k) {
  switch (k) {
    case EdgeKind::DemoTextToForerunner: return "demo-text->forerunner";
    case EdgeKind::QueryTextToForerunner: return "query-text->forerunner";
    case EdgeKind::DemoForerunnerToLabel: return "demo-forerunner->label";
    case EdgeKind::LabelToQueryForerunner: return "label->query-forerunner";
    case EdgeKind::ForerunnerToForerunner: return "forerunner->forerunner";
  }
  return "?";
}

inline EdgeKind parse_edge_kind(const std::string& s) {
  for (auto k : {EdgeKind::DemoTextToForerunner, EdgeKind::QueryTextToForerunner, EdgeKind::DemoForerunnerToLabel,
                 EdgeKind::LabelToQueryForerunner, EdgeKind::ForerunnerToForerunner}) {
    if (s == edge_kind_name(k)) return k;
  }
  throw ConfigError("unknown edge kind: " + s);
}

// Number of bottom layers touched by a fraction: floor(fraction * n_layers).
inline int affected_layers(double fraction, int n_layers) {
  return static_cast<int>(std::floor(fraction * n_layers + 1e-9));
}

// (query, key) pairs of one edge kind, independent of layer.
inline std::set<std::pair<int, int>> edge_pairs(const IclInput& in, EdgeKind kind) {
  std::set<std::pair<int, int>> pairs;
  auto text_positions = [&](Role role, int idx) {
    const Span* s = in.find(role, idx);
    std::vector<int> out;
    if (s)
      for (int p = s->start; p < s->end; ++p) out.push_back(p);
    return out;
  };
  switch (kind) {
    case EdgeKind::DemoTextToForerunner:
      for (int i = 0; i < in.k; ++i) {
        const int q = in.forerunner_pos(i);
        for (int kpos : text_positions(Role::demo_text, i)) pairs.emplace(q, kpos);
      }
      break;
    case EdgeKind::QueryTextToForerunner: {
      const int q = in.query_forerunner_pos();
      for (int kpos : text_positions(Role::query_text, -1)) pairs.emplace(q, kpos);
      break;
    }
    case EdgeKind::DemoForerunnerToLabel:
      for (int i = 0; i < in.k; ++i) pairs.emplace(in.label_pos(i), in.forerunner_pos(i));
      break;
    case EdgeKind::LabelToQueryForerunner: {
      const int q = in.query_forerunner_pos();
      for (int i = 0; i < in.k; ++i) pairs.emplace(q, in.label_pos(i));
      break;
    }
    case EdgeKind::ForerunnerToForerunner: {
      for (int i = 0; i < in.k; ++i)
        for (int j = 0; j < i; ++j) pairs.emplace(in.forerunner_pos(i), in.forerunner_pos(j));
      const int q = in.query_forerunner_pos();
      for (int j = 0; j < in.k; ++j) pairs.emplace(q, in.forerunner_pos(j));
      break;
    }
  }
  return pairs;
}

// Edges of `kind` for all heads in layers 0 .. floor(fraction * n_layers) - 1.
inline InterventionSpec compile_edges(const IclInput& in, EdgeKind kind, double fraction, int n_layers,
                                      InterventionMode mode = InterventionMode::zero_post_softmax) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ArgumentError("ablation fraction must lie in (0, 1]");
  InterventionSpec spec;
  spec.mode = mode;
  const auto pairs = edge_pairs(in, kind);
  const int n = affected_layers(fraction, n_layers);
  for (int l = 0; l < n; ++l)
    for (const auto& [q, k] : pairs) spec.add(l, kAllHeads, q, k);
  return spec;
}

// Same number of (query, key) pairs per affected layer, drawn uniformly from
// causal pairs outside the treatment set; all heads.
inline InterventionSpec random_control(const InterventionSpec& treatment, int n_tokens, std::uint64_t seed) {
  if (treatment.empty()) throw ArgumentError("random control needs a non-empty treatment");
  std::mt19937_64 rng(seed);
  InterventionSpec ctrl;
  ctrl.mode = treatment.mode;
  for (int l : treatment.layers()) {
    const auto taken = treatment.pairs_in_layer(l);
    std::vector<std::pair<int, int>> eligible;
    for (int q = 0; q < n_tokens; ++q)
      for (int k = 0; k <= q; ++k)
        if (!taken.count({q, k})) eligible.emplace_back(q, k);
    const std::size_t need = taken.size();
    if (eligible.size() < need) {
      throw ArgumentError("random control: layer " + std::to_string(l) + " has too few eligible pairs");
    }
    for (std::size_t i = 0; i < need; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, eligible.size() - 1);
      std::swap(eligible[i], eligible[d(rng)]);
      ctrl.add(l, kAllHeads, eligible[i].first, eligible[i].second);
    }
  }
  return ctrl;
}

// Restricted argmax over the label tokens at the query forerunner; ties to the lowest label id.
inline int predict_label(const Model& model, const IclInput& in, const InterventionSpec& spec = {}) {
  ForwardOptions opts;
  opts.record_attention = false;
  opts.record_hidden = false;
  const auto tr = forward(model, in.tokens, spec, opts);
  const VectorD row = tr.logits.row(in.query_forerunner_pos()).transpose().cast<double>();
  return static_cast<int>(argmax(restricted_softmax(row, in.label_token_ids)));
}

inline double accuracy(const Model& model, const std::vector<IclInput>& inputs,
                       const std::function<InterventionSpec(const IclInput&, std::size_t)>& spec_for) {
  if (inputs.empty()) throw ArgumentError("accuracy needs at least one input");
  int correct = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (predict_label(model, inputs[i], spec_for(inputs[i], i)) == inputs[i].query_truth) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

struct FractionResult {
  double fraction = 0.0;
  int layers = 0;
  double accuracy = 0.0;
  double delta = 0.0;  // accuracy - baseline
  std::vector<double> control_accuracy;
  double control_mean = 0.0;  // mean control accuracy delta
  double control_std = 0.0;   // population std of control deltas
};

struct AblationResult {
  EdgeKind kind = EdgeKind::LabelToQueryForerunner;
  double baseline = 0.0;
  std::vector<FractionResult> fractions;
  std::vector<std::uint64_t> seeds;
};

inline std::uint64_t control_seed(std::uint64_t base, std::size_t seed_index, std::size_t input_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(seed_index), static_cast<std::uint32_t>(input_index)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

// Fractions below 1/n_layers touch no layer and run with an empty spec.
inline AblationResult run_ablation(const Model& model, const std::vector<IclInput>& inputs, EdgeKind kind,
                                   const std::vector<double>& fractions, int n_control_seeds, std::uint64_t seed = 0,
                                   InterventionMode mode = InterventionMode::zero_post_softmax) {
  AblationResult res;
  res.kind = kind;
  const int L = model.config.n_layers;
  res.baseline = accuracy(model, inputs, [](const IclInput&, std::size_t) { return InterventionSpec{}; });
  for (int s = 0; s < n_control_seeds; ++s) res.seeds.push_back(seed + static_cast<std::uint64_t>(s));
  for (double f : fractions) {
    FractionResult fr;
    fr.fraction = f;
    fr.layers = affected_layers(f, L);
    auto treat = [&](const IclInput& in, std::size_t) { return compile_edges(in, kind, f, L, mode); };
    fr.accuracy = accuracy(model, inputs, treat);
    fr.delta = fr.accuracy - res.baseline;
    std::vector<double> deltas;
    for (int s = 0; s < n_control_seeds; ++s) {
      const double acc = accuracy(model, inputs, [&](const IclInput& in, std::size_t i) {
        const auto t = treat(in, i);
        if (t.empty()) return InterventionSpec{};
        return random_control(t, in.size(), control_seed(seed, static_cast<std::size_t>(s), i));
      });
      fr.control_accuracy.push_back(acc);
      deltas.push_back(acc - res.baseline);
    }
    if (!deltas.empty()) {
      double m = 0.0;
      for (double d : deltas) m += d;
      m /= static_cast<double>(deltas.size());
      double v = 0.0;
      for (double d : deltas) v += (d - m) * (d - m);
      fr.control_mean = m;
      fr.control_std = std::sqrt(v / static_cast<double>(deltas.size()));
    }
    res.fractions.push_back(std::move(fr));
  }
  return res;
}

}  // namespace iclc
