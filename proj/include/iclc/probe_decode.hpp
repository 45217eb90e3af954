#pragma once

// Label predictions from the LM head, from intermediate layers (logit lens),
// with contextual calibration, and from truncated forwards plus a centroid probe.

#include "iclc/errors.hpp"
#include "iclc/model.hpp"
#include "iclc/prompt.hpp"
#include "iclc/rep_metrics.hpp"
#include "iclc/tensor.hpp"
#include "iclc/trace_store.hpp"

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

namespace iclc {

enum class PredictionSource { lm_head, centroid, calibrated };

inline const char* source_name(PredictionSource s) {
  switch (s) {
    case PredictionSource::lm_head: return "lm-head";
    case PredictionSource::centroid: return "centroid";
    case PredictionSource::calibrated: return "calibrated";
  }
  return "?";
}

struct Prediction {
  std::vector<double> dist;  // over label ids
  int label = 0;
  PredictionSource source = PredictionSource::lm_head;
};

inline Prediction prediction_from_logits(const Eigen::Ref<const VectorD>& logits, const std::vector<int>& label_ids) {
  Prediction p;
  p.dist = restricted_softmax(logits, label_ids);
  p.label = static_cast<int>(argmax(p.dist));
  return p;
}

inline Prediction icl_predict(const Model& model, const IclInput& in) {
  const Matrix logits = forward_logits(model, in.tokens);
  return prediction_from_logits(logits.row(in.query_forerunner_pos()).transpose().cast<double>(), in.label_token_ids);
}

inline Prediction icl_predict(const TraceBundle& b) {
  if (b.trace.logits.size() == 0) throw ArgumentError("trace has no logits");
  return prediction_from_logits(b.trace.logits.row(b.input.query_forerunner_pos()).transpose().cast<double>(),
                                b.input.label_token_ids);
}

// LM head applied to hidden[layer] at the query forerunner. The final norm is
// applied unless `raw` is set.
inline Prediction direct_decode(const Model& model, const TraceBundle& b, int layer, bool raw = false) {
  if (layer < 0 || layer > model.config.n_layers || layer >= static_cast<int>(b.trace.hidden.size())) {
    throw ArgumentError("direct decode layer out of range: " + std::to_string(layer));
  }
  const Vector h = b.trace.hidden[static_cast<std::size_t>(layer)].row(b.input.query_forerunner_pos()).transpose();
  return prediction_from_logits(unembed(model, h, !raw), b.input.label_token_ids);
}

// p'_y proportional to p_y / p_cf,y
inline Prediction contextual_calibrate(const Prediction& pred, const Prediction& content_free) {
  if (pred.dist.size() != content_free.dist.size()) throw ArgumentError("calibration: label spaces differ");
  Prediction out;
  out.source = PredictionSource::calibrated;
  double sum = 0.0;
  for (std::size_t y = 0; y < pred.dist.size(); ++y) {
    if (!(content_free.dist[y] > 0.0)) throw ArgumentError("calibration: content-free probability is zero");
    out.dist.push_back(pred.dist[y] / content_free.dist[y]);
    sum += out.dist.back();
  }
  if (!(sum > 0.0)) throw ArgumentError("calibration: prediction has no mass");
  for (double& v : out.dist) v /= sum;
  out.label = static_cast<int>(argmax(out.dist));
  return out;
}

// Same demonstrations and template with the query text replaced by `text`
// (empty by default). Templates whose forerunner is the last text token need
// a non-empty placeholder such as " N/A".
inline IclInput content_free_input(const Tokenizer& tok, const IclInput& in, const std::string& text = "") {
  LabeledExample q = in.query;
  q.text = text;
  q.id = -1;
  auto out = build_icl_input_shown(tok, in.demos, q, in.tmpl, in.options, in.demo_shown, in.abstract_labels);
  out.perturbation = in.perturbation;
  return out;
}

// Centroid probe on the query-forerunner state after block `layer`; blocks
// above `layer` are never executed.
inline Prediction early_exit_classify(const Model& model, const IclInput& in, int layer, const CentroidModel& cm) {
  if (layer < 0 || layer > model.config.n_layers) throw ArgumentError("early exit layer out of range");
  if (cm.layer >= 0 && cm.layer != layer) {
    throw ArgumentError("centroid model trained at layer " + std::to_string(cm.layer) + ", used at " +
                        std::to_string(layer));
  }
  if (!cm.role.empty() && cm.role != "query_forerunner") {
    throw ArgumentError("centroid model trained on role " + cm.role + ", expected query_forerunner");
  }
  const auto hidden = forward_truncated(model, in.tokens, layer);
  const VectorD h = hidden[static_cast<std::size_t>(layer)].row(in.query_forerunner_pos()).transpose().cast<double>();
  Prediction p;
  p.source = PredictionSource::centroid;
  p.label = centroid_predict(cm, h);
  p.dist.assign(static_cast<std::size_t>(cm.n_labels()), 0.0);
  p.dist[static_cast<std::size_t>(p.label)] = 1.0;
  return p;
}

struct EarlyExitCost {
  double truncated_seconds = 0.0;
  double full_seconds = 0.0;
  double wall_ratio = 0.0;  // truncated / full
  std::int64_t params_used = 0;
  std::int64_t params_full = 0;
};

// Wall-clock cost of truncated forwards (through `layer`) relative to full
// forwards with the LM head, over the given inputs.
inline EarlyExitCost early_exit_cost(const Model& model, const std::vector<IclInput>& inputs, int layer) {
  using clock = std::chrono::steady_clock;
  EarlyExitCost c;
  const auto t0 = clock::now();
  for (const auto& in : inputs) (void)forward_truncated(model, in.tokens, layer);
  const auto t1 = clock::now();
  for (const auto& in : inputs) (void)forward_logits(model, in.tokens);
  const auto t2 = clock::now();
  c.truncated_seconds = std::chrono::duration<double>(t1 - t0).count();
  c.full_seconds = std::chrono::duration<double>(t2 - t1).count();
  c.wall_ratio = c.full_seconds > 0.0 ? c.truncated_seconds / c.full_seconds : 0.0;
  c.params_used = model.parameter_count(layer, false);
  c.params_full = model.parameter_count(model.config.n_layers, true);
  return c;
}

}  // namespace iclc
