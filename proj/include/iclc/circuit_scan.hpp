#pragma once

// Threshold detectors and circuit metrics over captured traces: forerunner
// token heads, (correct) induction heads, overlap rate, normalized copy
// magnitude, correct label assignment, subspace projection with attention
// assignment, and induction-predicted outputs.

#include "iclc/errors.hpp"
#include "iclc/model.hpp"
#include "iclc/tensor.hpp"
#include "iclc/trace_store.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <compare>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace iclc {

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

struct HeadCounts {
  std::map<HeadId, int> counts;
  std::string tag;

  void add(HeadId h, int n = 1) { counts[h] += n; }
  int get(HeadId h) const {
    auto it = counts.find(h);
    return it == counts.end() ? 0 : it->second;
  }
  long total() const {
    long t = 0;
    for (const auto& [_, c] : counts) t += c;
    return t;
  }
  HeadCounts& operator+=(const HeadCounts& o) {
    for (const auto& [h, c] : o.counts) counts[h] += c;
    return *this;
  }
};

struct DetectorConfig {
  double multiplier = 5.0;
  int layer_begin = 0;
  int layer_end = -1;  // exclusive; -1 = all layers
};

namespace detail {

inline const Matrix& attn_at(const TraceBundle& b, int layer, int head) {
  if (b.trace.attn.empty()) throw ArgumentError("trace was captured without attention");
  return b.trace.attn.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
}

inline std::pair<int, int> layer_range(const TraceBundle& b, const DetectorConfig& cfg) {
  const int L = static_cast<int>(b.trace.attn.size());
  const int end = cfg.layer_end < 0 ? L : std::min(cfg.layer_end, L);
  return {std::max(0, cfg.layer_begin), end};
}

inline int n_heads(const TraceBundle& b) { return b.trace.attn.empty() ? 0 : static_cast<int>(b.trace.attn[0].size()); }

// (label position, forerunner position) for every rendered label, query label included.
inline std::vector<std::pair<int, int>> label_forerunner_pairs(const IclInput& in) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < in.k; ++i) out.emplace_back(in.label_pos(i), in.forerunner_pos(i));
  if (const Span* s = in.find(Role::query_label)) out.emplace_back(s->start, in.query_forerunner_pos());
  return out;
}

}  // namespace detail

// Forerunner-token-head rule: attention from label to its forerunner >= multiplier / n_t,
// n_t = number of tokens before the label.
inline bool forerunner_mark(double alpha, int n_t, double multiplier = 5.0) {
  return n_t > 0 && alpha >= multiplier / n_t;
}

inline bool induction_mark(double label_mass, int k, int n_t, double multiplier = 5.0) {
  return n_t > 0 && label_mass >= multiplier * k / n_t;
}

inline bool correct_induction_mark(double correct_mass, int k, int n_labels, int n_t, double multiplier = 5.0) {
  return n_t > 0 && n_labels > 0 && correct_mass >= multiplier * k / (static_cast<double>(n_labels) * n_t);
}

// Count, per head, of label positions whose attention to the preceding forerunner clears the threshold.
inline HeadCounts mark_forerunner_heads(const TraceBundle& b, const DetectorConfig& cfg = {}) {
  const auto pairs = detail::label_forerunner_pairs(b.input);
  if (pairs.empty()) throw SpanError("forerunner head detection needs at least one label span");
  HeadCounts hc;
  const auto [l0, l1] = detail::layer_range(b, cfg);
  for (int l = l0; l < l1; ++l) {
    for (int h = 0; h < detail::n_heads(b); ++h) {
      const Matrix& a = detail::attn_at(b, l, h);
      int c = 0;
      for (const auto& [p, s] : pairs)
        if (forerunner_mark(a(p, s), p, cfg.multiplier)) ++c;
      hc.counts[{l, h}] = c;
    }
  }
  return hc;
}

struct InductionCounts {
  HeadCounts induction;
  HeadCounts correct;
};

// Attention mass from the query forerunner onto demonstration labels; the
// correct subset is defined by the demonstrations' ground truth.
inline std::pair<double, double> label_mass(const TraceBundle& b, int layer, int head) {
  const auto& in = b.input;
  const Matrix& a = detail::attn_at(b, layer, head);
  const int q = in.query_forerunner_pos();
  double all = 0.0;
  double correct = 0.0;
  for (int i = 0; i < in.k; ++i) {
    const double v = a(q, in.label_pos(i));
    all += v;
    if (in.demo_truth[static_cast<std::size_t>(i)] == in.query_truth) correct += v;
  }
  return {all, correct};
}

inline InductionCounts mark_induction_heads(const TraceBundle& b, const DetectorConfig& cfg = {}) {
  const auto& in = b.input;
  if (in.k < 1) throw ArgumentError("induction head detection needs k >= 1");
  const int n_t = in.query_forerunner_pos();
  InductionCounts out;
  const auto [l0, l1] = detail::layer_range(b, cfg);
  for (int l = l0; l < l1; ++l) {
    for (int h = 0; h < detail::n_heads(b); ++h) {
      const auto [all, correct] = label_mass(b, l, h);
      out.induction.counts[{l, h}] = induction_mark(all, in.k, n_t, cfg.multiplier) ? 1 : 0;
      out.correct.counts[{l, h}] = correct_induction_mark(correct, in.k, in.n_labels, n_t, cfg.multiplier) ? 1 : 0;
    }
  }
  return out;
}

// S = 2 * sum_h min(n1, n2) / sum_h (n1 + n2)
inline double overlap_rate(const HeadCounts& c1, const HeadCounts& c2) {
  double num = 0.0;
  double den = 0.0;
  std::map<HeadId, std::pair<int, int>> merged;
  for (const auto& [h, c] : c1.counts) merged[h].first = c;
  for (const auto& [h, c] : c2.counts) merged[h].second = c;
  for (const auto& [h, p] : merged) {
    if (p.first < 0 || p.second < 0) throw ArgumentError("head counts must be non-negative");
    num += std::min(p.first, p.second);
    den += p.first + p.second;
  }
  if (den == 0.0) throw UndefinedMetric("overlap rate undefined: both count totals are zero");
  return 2.0 * num / den;
}

// Per layer, the largest label-to-forerunner attention over heads, averaged over labels.
inline double copy_magnitude(const TraceBundle& b, int layer) {
  const auto pairs = detail::label_forerunner_pairs(b.input);
  if (pairs.empty()) throw SpanError("copy magnitude needs at least one label span");
  double sum = 0.0;
  for (const auto& [p, s] : pairs) {
    double mx = 0.0;
    for (int h = 0; h < detail::n_heads(b); ++h) mx = std::max(mx, static_cast<double>(detail::attn_at(b, layer, h)(p, s)));
    sum += mx;
  }
  return sum / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Normalized copy magnitude

struct NcmValues {
  std::vector<double> label;
  std::vector<double> non_label;
};

// NCM_i = n_t * attn[i][i-1] with n_t = i, for every position i >= 1, split
// by whether position i holds a label token.
inline double ncm_value(double alpha_prev, int n_t) { return n_t * alpha_prev; }

inline std::vector<NcmValues> ncm(const TraceBundle& b, int layer) {
  const int H = detail::n_heads(b);
  const int T = b.input.size();
  std::vector<bool> is_label(static_cast<std::size_t>(T), false);
  for (const auto& [p, s] : detail::label_forerunner_pairs(b.input)) is_label[static_cast<std::size_t>(p)] = true;
  std::vector<NcmValues> out(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) {
    const Matrix& a = detail::attn_at(b, layer, h);
    for (int i = 1; i < T; ++i) {
      const double v = ncm_value(a(i, i - 1), i);
      (is_label[static_cast<std::size_t>(i)] ? out[static_cast<std::size_t>(h)].label
                                             : out[static_cast<std::size_t>(h)].non_label)
          .push_back(v);
    }
  }
  return out;
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ArgumentError("KS test needs two non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double en = std::sqrt(na * nb / (na + nb));
  const double lambda = (en + 0.12 + 0.11 / en) * d;
  double p = 0.0;
  if (lambda < 1e-3) {
    p = 1.0;
  } else {
    double sign = 1.0;
    for (int k = 1; k <= 100; ++k) {
      const double term = sign * 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
      p += term;
      if (std::abs(term) < 1e-12) break;
      sign = -sign;
    }
    p = std::clamp(p, 0.0, 1.0);
  }
  return {d, p};
}

// ---------------------------------------------------------------------------
// Correct label assignment

enum class ClaVariant { vanilla, head_average, best_head };

inline const char* cla_variant_name(ClaVariant v) {
  switch (v) {
    case ClaVariant::vanilla: return "vanilla";
    case ClaVariant::head_average: return "head-average";
    case ClaVariant::best_head: return "best-head";
  }
  return "?";
}

// Share of one head's label-directed attention that lands on correct labels.
inline std::optional<double> cla_head(const TraceBundle& b, int layer, int head) {
  const auto [all, correct] = label_mass(b, layer, head);
  if (!(all > 0.0)) return std::nullopt;
  return correct / all;
}

// Vanilla: scores q.k on hidden[layer] (the input to block `layer`) over the
// causal context, normalized by their sum. Head variants use recorded softmax
// attention of block `layer`. Returns nullopt when undefined.
inline std::optional<double> cla(const TraceBundle& b, int layer, ClaVariant variant) {
  const auto& in = b.input;
  if (in.k < 1) throw ArgumentError("CLA needs at least one demonstration label");
  if (variant == ClaVariant::vanilla) {
    if (layer < 0 || layer >= static_cast<int>(b.trace.hidden.size())) throw ArgumentError("CLA layer out of range");
    const Matrix& hid = b.trace.hidden[static_cast<std::size_t>(layer)];
    const int q = in.query_forerunner_pos();
    const VectorD hq = hid.row(q).transpose().cast<double>();
    double context = 0.0;
    for (int j = 0; j <= q; ++j) context += hq.dot(hid.row(j).transpose().cast<double>());
    if (!(context > 0.0)) return std::nullopt;
    double all = 0.0;
    double correct = 0.0;
    for (int i = 0; i < in.k; ++i) {
      const double a = hq.dot(hid.row(in.label_pos(i)).transpose().cast<double>()) / context;
      all += a;
      if (in.demo_truth[static_cast<std::size_t>(i)] == in.query_truth) correct += a;
    }
    if (all == 0.0) return std::nullopt;
    return correct / all;
  }
  std::vector<double> vals;
  for (int h = 0; h < detail::n_heads(b); ++h)
    if (auto v = cla_head(b, layer, h)) vals.push_back(*v);
  if (vals.empty()) return std::nullopt;
  if (variant == ClaVariant::best_head) return *std::max_element(vals.begin(), vals.end());
  double s = 0.0;
  for (double v : vals) s += v;
  return s / static_cast<double>(vals.size());
}

// ---------------------------------------------------------------------------
// Subspace projection and attention assignment

struct SubspaceProjection {
  HeadId head;
  MatrixD mapped;          // n x d: kernel * k_i
  std::vector<int> sign;   // +1 for correct labels, -1 otherwise
  VectorD mean;            // centroid of mapped points
  MatrixD axes;            // 2 x d principal axes (second row zero in 1-D fallback)
  VectorD explained;       // eigenvalues for the two axes
  MatrixD points;          // n x 2 projected coordinates
  Eigen::Vector2d zero_point = Eigen::Vector2d::Zero();
  bool one_dimensional = false;

  // sum_{i+} q . mapped_i - sum_{i-} q . mapped_i
  double att_assign(const Eigen::Ref<const VectorD>& q) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < mapped.rows(); ++i) s += sign[static_cast<std::size_t>(i)] * q.dot(mapped.row(i).transpose());
    return s;
  }

  Eigen::Vector2d project(const Eigen::Ref<const VectorD>& v) const {
    const VectorD c = v - mean;
    return {axes.row(0).dot(c), axes.row(1).dot(c)};
  }

  // Point of the original space at plane coordinates (a, b).
  VectorD lift(double a, double b) const { return mean + a * axes.row(0).transpose() + b * axes.row(1).transpose(); }
};

// Fixes an eigenvector's sign: its largest-magnitude entry (lowest index on ties) is positive.
inline void canonical_sign(Eigen::Ref<VectorD> v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  if (v(best) < 0) v = -v;
}

// Maps label representations through the head's kernel and runs a centered
// 2-component PCA on the mapped cloud.
inline SubspaceProjection subspace_project(const MatrixD& kernel, const MatrixD& label_reps,
                                           const std::vector<bool>& correct, HeadId head = {}) {
  const auto n = label_reps.rows();
  if (n < 2) throw ArgumentError("subspace projection needs at least 2 label representations");
  if (static_cast<Eigen::Index>(correct.size()) != n) throw ArgumentError("one correctness flag per label rep");
  if (kernel.rows() != label_reps.cols() || kernel.cols() != label_reps.cols()) {
    throw ArgumentError("kernel dimension does not match representations");
  }
  SubspaceProjection sp;
  sp.head = head;
  sp.mapped = label_reps * kernel.transpose();
  for (bool c : correct) sp.sign.push_back(c ? 1 : -1);
  sp.mean = sp.mapped.colwise().mean().transpose();
  const MatrixD centered = sp.mapped.rowwise() - sp.mean.transpose();
  const MatrixD cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  const VectorD evals = es.eigenvalues();  // ascending
  sp.axes = MatrixD::Zero(2, d);
  sp.explained = VectorD::Zero(2);
  VectorD a0 = es.eigenvectors().col(d - 1);
  canonical_sign(a0);
  sp.axes.row(0) = a0.transpose();
  sp.explained(0) = std::max(0.0, evals(d - 1));
  const double tol = 1e-12 * std::max(1.0, std::abs(evals(d - 1)));
  if (d >= 2 && evals(d - 2) > tol) {
    VectorD a1 = es.eigenvectors().col(d - 2);
    canonical_sign(a1);
    sp.axes.row(1) = a1.transpose();
    sp.explained(1) = evals(d - 2);
  } else {
    sp.one_dimensional = true;
  }
  sp.points.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) sp.points.row(i) = sp.project(sp.mapped.row(i).transpose()).transpose();
  sp.zero_point = sp.project(VectorD::Zero(d));
  return sp;
}

inline SubspaceProjection subspace_project(const Model& model, HeadId head, const RepSet& label_reps,
                                           const std::vector<bool>& correct) {
  label_reps.validate();
  return subspace_project(qk_kernel(model, head.layer, head.head), label_reps.reps, correct, head);
}

struct AttAssignGrid {
  std::vector<double> xs, ys;
  MatrixD values;  // ys.size() x xs.size()
};

// AttAssign evaluated on a regular grid of the projection plane.
inline AttAssignGrid att_assign_grid(const SubspaceProjection& sp, int resolution, double margin = 0.1) {
  if (resolution < 2) throw ArgumentError("grid resolution must be >= 2");
  double lo0 = std::min(sp.points.col(0).minCoeff(), sp.zero_point(0));
  double hi0 = std::max(sp.points.col(0).maxCoeff(), sp.zero_point(0));
  double lo1 = std::min(sp.points.col(1).minCoeff(), sp.zero_point(1));
  double hi1 = std::max(sp.points.col(1).maxCoeff(), sp.zero_point(1));
  const double pad0 = std::max(1e-9, (hi0 - lo0) * margin);
  const double pad1 = std::max(1e-9, (hi1 - lo1) * margin);
  lo0 -= pad0, hi0 += pad0, lo1 -= pad1, hi1 += pad1;
  AttAssignGrid g;
  for (int i = 0; i < resolution; ++i) {
    g.xs.push_back(lo0 + (hi0 - lo0) * i / (resolution - 1));
    g.ys.push_back(lo1 + (hi1 - lo1) * i / (resolution - 1));
  }
  g.values.resize(resolution, resolution);
  for (int r = 0; r < resolution; ++r)
    for (int c = 0; c < resolution; ++c) g.values(r, c) = sp.att_assign(sp.lift(g.xs[static_cast<std::size_t>(c)], g.ys[static_cast<std::size_t>(r)]));
  return g;
}

// ---------------------------------------------------------------------------
// Induction-predicted output

// softmax over labels of o_l = n_t * sum of the head's attention from the
// query forerunner to demonstration labels rendered as l.
inline std::vector<double> induction_predicted_output(const TraceBundle& b, HeadId head) {
  const auto& in = b.input;
  const Matrix& a = detail::attn_at(b, head.layer, head.head);
  const int q = in.query_forerunner_pos();
  std::vector<double> o(static_cast<std::size_t>(in.n_labels), 0.0);
  for (int i = 0; i < in.k; ++i) o[static_cast<std::size_t>(in.demo_shown[static_cast<std::size_t>(i)])] += a(q, in.label_pos(i));
  for (double& v : o) v *= q;
  return softmax(o);
}

// Jensen-Shannon divergence in bits. Inputs that do not sum to 1 are
// renormalized with a warning on stderr.
inline double js_divergence(std::vector<double> p, std::vector<double> q) {
  if (p.size() != q.size() || p.empty()) throw ArgumentError("JS divergence: distributions differ in support");
  auto fix = [](std::vector<double>& v, const char* which) {
    double s = 0.0;
    for (double x : v) {
      if (x < 0.0 || !std::isfinite(x)) throw ArgumentError("JS divergence: negative or non-finite probability");
      s += x;
    }
    if (!(s > 0.0)) throw ArgumentError("JS divergence: zero-mass distribution");
    if (std::abs(s - 1.0) > 1e-9) {
      std::cerr << "warning: js_divergence renormalized " << which << " (sum " << s << ")\n";
      for (double& x : v) x /= s;
    }
  };
  fix(p, "p");
  fix(q, "q");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

// The `per_layer` heads with the lowest value in each layer, ascending.
inline std::vector<std::pair<HeadId, double>> lowest_per_layer(const std::map<HeadId, double>& values, int per_layer = 5) {
  std::map<int, std::vector<std::pair<HeadId, double>>> by_layer;
  for (const auto& [h, v] : values) by_layer[h.layer].emplace_back(h, v);
  std::vector<std::pair<HeadId, double>> out;
  for (auto& [l, vec] : by_layer) {
    std::stable_sort(vec.begin(), vec.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    for (int i = 0; i < per_layer && i < static_cast<int>(vec.size()); ++i) out.push_back(vec[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace iclc
