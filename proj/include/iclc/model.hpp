#pragma once

// Decoder-only transformer forward pass with instrumentation taps.
//
// Hidden-state indexing: hidden[0] is the residual stream after the embedding
// (plus learned positions), hidden[l] is the residual stream after block l.
// The final norm is applied only when producing logits.

#include "iclc/errors.hpp"
#include "iclc/safetensors.hpp"
#include "iclc/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace iclc {

enum class NormKind { layernorm, rmsnorm, none };
enum class PosKind { learned, rotary, none };
enum class MlpKind { gelu, silu_gated, none };

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::layernorm: return "layernorm";
    case NormKind::rmsnorm: return "rmsnorm";
    case NormKind::none: return "none";
  }
  return "?";
}
inline std::string to_string(PosKind k) {
  switch (k) {
    case PosKind::learned: return "learned";
    case PosKind::rotary: return "rotary";
    case PosKind::none: return "none";
  }
  return "?";
}
inline std::string to_string(MlpKind k) {
  switch (k) {
    case MlpKind::gelu: return "gelu";
    case MlpKind::silu_gated: return "silu-gated";
    case MlpKind::none: return "none";
  }
  return "?";
}

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int vocab_size = 0;
  int max_seq = 0;
  int d_ff = 0;  // 0 means 4 * d_model
  NormKind norm_kind = NormKind::layernorm;
  PosKind pos_kind = PosKind::learned;
  MlpKind mlp_kind = MlpKind::gelu;
  float norm_eps = 1e-5f;
  float rope_base = 10000.0f;
  bool tie_embeddings = true;
  bool bias = true;
  std::string layout = "gpt2";  // tensor naming: "gpt2" (HF GPT-2) or "llama" (HF Llama)
  std::optional<int> bos_token_id;
  std::string tag;

  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || vocab_size <= 0 || max_seq <= 0) {
      throw LoadError("model config: all counts must be positive");
    }
    if (n_heads * d_head != d_model) {
      throw LoadError("model config: n_heads x d_head (" + std::to_string(n_heads) + " x " + std::to_string(d_head) +
                      " = " + std::to_string(n_heads * d_head) + ") != d_model (" + std::to_string(d_model) + ")");
    }
    if (!(norm_eps > 0.0f)) throw LoadError("model config: norm_eps must be > 0");
    if (pos_kind == PosKind::rotary && (d_head % 2 != 0 || !(rope_base > 0.0f))) {
      throw LoadError("model config: rotary positions need an even d_head and rope_base > 0");
    }
    if (layout != "gpt2" && layout != "llama") throw LoadError("model config: unknown layout '" + layout + "'");
    if (bos_token_id && (*bos_token_id < 0 || *bos_token_id >= vocab_size)) {
      throw LoadError("model config: bos_token_id out of range");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},       {"d_head", c.d_head},
                     {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                     {"d_ff", c.ff_dim()},         {"norm_kind", to_string(c.norm_kind)},
                     {"pos_kind", to_string(c.pos_kind)}, {"mlp_kind", to_string(c.mlp_kind)},
                     {"norm_eps", c.norm_eps},     {"rope_base", c.rope_base},
                     {"tie_embeddings", c.tie_embeddings}, {"bias", c.bias},
                     {"layout", c.layout},         {"tag", c.tag}};
  if (c.bos_token_id) j["bos_token_id"] = *c.bos_token_id;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.contains("model_type") && j.at("model_type") == "gpt2" && !j.contains("n_layers")) {
      // Hugging Face GPT-2 config.json
      c.n_layers = j.at("n_layer");
      c.n_heads = j.at("n_head");
      c.d_model = j.at("n_embd");
      c.d_head = c.d_model / c.n_heads;
      c.vocab_size = j.at("vocab_size");
      c.max_seq = j.at("n_positions");
      c.d_ff = j.value("n_inner", nlohmann::json()).is_number() ? j.at("n_inner").get<int>() : 0;
      c.norm_eps = j.value("layer_norm_epsilon", 1e-5f);
      const int bos = j.value("bos_token_id", 50256);
      if (bos >= 0 && bos < c.vocab_size) c.bos_token_id = bos;
      c.tag = j.value("_name_or_path", std::string("gpt2"));
      return c;
    }
    if (j.contains("model_type") && j.at("model_type") == "llama" && !j.contains("n_layers")) {
      // Hugging Face Llama config.json
      c.n_layers = j.at("num_hidden_layers");
      c.n_heads = j.at("num_attention_heads");
      c.d_model = j.at("hidden_size");
      c.d_head = j.value("head_dim", c.d_model / c.n_heads);
      if (j.value("num_key_value_heads", c.n_heads) != c.n_heads) {
        throw LoadError("model config: grouped-query attention is not supported");
      }
      c.vocab_size = j.at("vocab_size");
      c.max_seq = j.at("max_position_embeddings");
      c.d_ff = j.at("intermediate_size");
      c.norm_kind = NormKind::rmsnorm;
      c.pos_kind = PosKind::rotary;
      c.mlp_kind = MlpKind::silu_gated;
      c.norm_eps = j.value("rms_norm_eps", 1e-6f);
      c.rope_base = j.value("rope_theta", 10000.0f);
      for (const char* key : {"rope_parameters", "rope_scaling"}) {
        if (!j.contains(key) || !j.at(key).is_object()) continue;
        const auto& rp = j.at(key);
        const std::string type = rp.value("rope_type", rp.value("type", std::string("default")));
        if (type != "default") throw LoadError("model config: rope type '" + type + "' is not supported");
        c.rope_base = rp.value("rope_theta", c.rope_base);
      }
      c.tie_embeddings = j.value("tie_word_embeddings", false);
      c.bias = j.value("attention_bias", false);
      c.layout = "llama";
      if (j.contains("bos_token_id") && j.at("bos_token_id").is_number()) c.bos_token_id = j.at("bos_token_id").get<int>();
      c.tag = j.value("_name_or_path", std::string("llama"));
      return c;
    }
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_model = j.at("d_model");
    c.d_head = j.at("d_head");
    c.vocab_size = j.at("vocab_size");
    c.max_seq = j.at("max_seq");
    c.d_ff = j.value("d_ff", 0);
    const std::string norm = j.value("norm_kind", std::string("layernorm"));
    const std::string pos = j.value("pos_kind", std::string("learned"));
    const std::string mlp = j.value("mlp_kind", std::string("gelu"));
    if (norm == "layernorm") c.norm_kind = NormKind::layernorm;
    else if (norm == "rmsnorm") c.norm_kind = NormKind::rmsnorm;
    else if (norm == "none") c.norm_kind = NormKind::none;
    else throw LoadError("model config: unknown norm_kind '" + norm + "'");
    if (pos == "learned") c.pos_kind = PosKind::learned;
    else if (pos == "rotary") c.pos_kind = PosKind::rotary;
    else if (pos == "none") c.pos_kind = PosKind::none;
    else throw LoadError("model config: unknown pos_kind '" + pos + "'");
    if (mlp == "gelu") c.mlp_kind = MlpKind::gelu;
    else if (mlp == "silu-gated") c.mlp_kind = MlpKind::silu_gated;
    else if (mlp == "none") c.mlp_kind = MlpKind::none;
    else throw LoadError("model config: unknown mlp_kind '" + mlp + "'");
    c.norm_eps = j.value("norm_eps", 1e-5f);
    c.rope_base = j.value("rope_base", 10000.0f);
    c.tie_embeddings = j.value("tie_embeddings", true);
    const bool llama_like = c.norm_kind == NormKind::rmsnorm && c.pos_kind == PosKind::rotary;
    c.layout = j.value("layout", std::string(llama_like ? "llama" : "gpt2"));
    c.bias = j.value("bias", c.layout == "gpt2");
    if (j.contains("bos_token_id") && !j.at("bos_token_id").is_null()) c.bos_token_id = j.at("bos_token_id").get<int>();
    c.tag = j.value("tag", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("model config: ") + e.what());
  }
  return c;
}

struct NormWeights {
  Vector weight;
  Vector bias;  // empty for rmsnorm
};

struct AttentionWeights {
  // Projections are stored input-major (d_in x d_out) so that Y = X * W.
  Matrix wq, wk, wv, wo;
  Vector bq, bk, bv, bo;  // empty when the model has no biases
};

struct MlpWeights {
  Matrix w_in;    // d_model x d_ff (gelu: c_fc, gated: up)
  Matrix w_gate;  // d_model x d_ff, gated only
  Matrix w_out;   // d_ff x d_model
  Vector b_in, b_out;
};

struct Block {
  NormWeights ln_attn;
  NormWeights ln_mlp;
  AttentionWeights attn;
  MlpWeights mlp;
};

struct Model {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq x d_model (learned positions only)
  std::vector<Block> blocks;
  NormWeights final_norm;
  Matrix unembedding;  // d_model x vocab

  // Parameter count of embeddings plus the first `n_blocks` blocks, plus the
  // head (final norm + unembedding) when `with_head`.
  std::int64_t parameter_count(int n_blocks, bool with_head = true) const {
    std::int64_t n = token_embedding.size() + position_embedding.size();
    for (int l = 0; l < n_blocks && l < static_cast<int>(blocks.size()); ++l) {
      const auto& b = blocks[static_cast<std::size_t>(l)];
      n += b.ln_attn.weight.size() + b.ln_attn.bias.size() + b.ln_mlp.weight.size() + b.ln_mlp.bias.size();
      n += b.attn.wq.size() + b.attn.wk.size() + b.attn.wv.size() + b.attn.wo.size();
      n += b.attn.bq.size() + b.attn.bk.size() + b.attn.bv.size() + b.attn.bo.size();
      n += b.mlp.w_in.size() + b.mlp.w_gate.size() + b.mlp.w_out.size() + b.mlp.b_in.size() + b.mlp.b_out.size();
    }
    if (with_head) {
      n += final_norm.weight.size() + final_norm.bias.size();
      if (!config.tie_embeddings) n += unembedding.size();
    }
    return n;
  }
};

// ---------------------------------------------------------------------------
// Interventions

inline constexpr int kAllHeads = -1;

struct AttentionEdge {
  int layer = 0;
  int head = kAllHeads;
  int query = 0;
  int key = 0;
  auto operator<=>(const AttentionEdge&) const = default;
};

enum class InterventionMode { zero_post_softmax, mask_pre_softmax };

inline std::string to_string(InterventionMode m) {
  return m == InterventionMode::zero_post_softmax ? "zero-post-softmax" : "mask-pre-softmax";
}

struct InterventionSpec {
  std::set<AttentionEdge> edges;
  InterventionMode mode = InterventionMode::zero_post_softmax;

  bool empty() const { return edges.empty(); }

  void add(int layer, int head, int query, int key) { edges.insert({layer, head, query, key}); }

  // Distinct (query, key) pairs touched in `layer`, regardless of head.
  std::set<std::pair<int, int>> pairs_in_layer(int layer) const {
    std::set<std::pair<int, int>> out;
    for (const auto& e : edges)
      if (e.layer == layer) out.emplace(e.query, e.key);
    return out;
  }

  std::set<int> layers() const {
    std::set<int> out;
    for (const auto& e : edges) out.insert(e.layer);
    return out;
  }

  void validate(const ModelConfig& cfg, int n_tokens) const {
    for (const auto& e : edges) {
      if (e.layer < 0 || e.layer >= cfg.n_layers) throw ArgumentError("intervention edge layer out of range");
      if (e.head != kAllHeads && (e.head < 0 || e.head >= cfg.n_heads)) {
        throw ArgumentError("intervention edge head out of range");
      }
      if (e.query < 0 || e.query >= n_tokens || e.key < 0 || e.key >= n_tokens) {
        throw ArgumentError("intervention edge token index out of range");
      }
      if (e.key > e.query) throw ArgumentError("intervention edge violates causality (key > query)");
    }
  }
};

// ---------------------------------------------------------------------------
// Trace

struct ForwardTrace {
  std::vector<Matrix> hidden;             // n_layers + 1 entries, each T x d_model
  std::vector<std::vector<Matrix>> attn;  // [layer][head], each T x T post-softmax
  Matrix logits;                          // T x vocab
  InterventionSpec applied_spec;

  int n_tokens() const { return hidden.empty() ? static_cast<int>(logits.rows()) : static_cast<int>(hidden[0].rows()); }
};

struct ForwardOptions {
  bool record_hidden = true;
  bool record_attention = true;
  bool compute_logits = true;
  int n_blocks = -1;  // run only the first n blocks; -1 = all
};

namespace detail {

inline void apply_norm(const ModelConfig& cfg, const NormWeights& w, const Matrix& x, Matrix& out) {
  out.resize(x.rows(), x.cols());
  switch (cfg.norm_kind) {
    case NormKind::none:
      out = x;
      return;
    case NormKind::layernorm:
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float mean = x.row(r).mean();
        const float var = (x.row(r).array() - mean).square().mean();
        const float inv = 1.0f / std::sqrt(var + cfg.norm_eps);
        out.row(r) = ((x.row(r).array() - mean) * inv * w.weight.transpose().array() + w.bias.transpose().array()).matrix();
      }
      return;
    case NormKind::rmsnorm:
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float ms = x.row(r).squaredNorm() / static_cast<float>(x.cols());
        const float inv = 1.0f / std::sqrt(ms + cfg.norm_eps);
        out.row(r) = (x.row(r).array() * inv * w.weight.transpose().array()).matrix();
      }
      return;
  }
}

inline float gelu_tanh(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline void add_bias(Matrix& m, const Vector& b) {
  if (b.size() == 0) return;
  m.rowwise() += b.transpose();
}

// Rotate-half rotary embedding applied in place to columns [off, off + d_head).
inline void apply_rotary(Matrix& m, int off, int d_head, float base) {
  const int half = d_head / 2;
  for (Eigen::Index pos = 0; pos < m.rows(); ++pos) {
    for (int i = 0; i < half; ++i) {
      const double inv_freq = std::pow(static_cast<double>(base), -2.0 * i / d_head);
      const double angle = static_cast<double>(pos) * inv_freq;
      const float c = static_cast<float>(std::cos(angle));
      const float s = static_cast<float>(std::sin(angle));
      const float x1 = m(pos, off + i);
      const float x2 = m(pos, off + i + half);
      m(pos, off + i) = x1 * c - x2 * s;
      m(pos, off + i + half) = x2 * c + x1 * s;
    }
  }
}

struct LayerEdits {
  // Per head: list of (query, key) to remove.
  std::vector<std::vector<std::pair<int, int>>> per_head;
  bool any = false;
};

inline std::vector<LayerEdits> group_edits(const InterventionSpec& spec, const ModelConfig& cfg) {
  std::vector<LayerEdits> out(static_cast<std::size_t>(cfg.n_layers));
  for (auto& le : out) le.per_head.resize(static_cast<std::size_t>(cfg.n_heads));
  for (const auto& e : spec.edges) {
    auto& le = out[static_cast<std::size_t>(e.layer)];
    le.any = true;
    if (e.head == kAllHeads) {
      for (auto& h : le.per_head) h.emplace_back(e.query, e.key);
    } else {
      le.per_head[static_cast<std::size_t>(e.head)].emplace_back(e.query, e.key);
    }
  }
  return out;
}

}  // namespace detail

inline void check_tokens(const Model& model, std::span<const int> tokens) {
  if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_seq) {
    throw ArgumentError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                        std::to_string(model.config.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || t >= model.config.vocab_size) throw ArgumentError("forward: token id out of range: " + std::to_string(t));
  }
}

inline Matrix embed(const Model& model, std::span<const int> tokens) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  Matrix x(T, model.config.d_model);
  for (Eigen::Index t = 0; t < T; ++t) {
    x.row(t) = model.token_embedding.row(tokens[static_cast<std::size_t>(t)]);
    if (model.config.pos_kind == PosKind::learned) x.row(t) += model.position_embedding.row(t);
  }
  return x;
}

// Runs one transformer block on residual stream `x` in place. When `attn_out`
// is non-null, per-head post-softmax (post-intervention) probabilities are stored.
inline void run_block(const Model& model, int layer, Matrix& x, const detail::LayerEdits* edits,
                      InterventionMode mode, std::vector<Matrix>* attn_out) {
  const auto& cfg = model.config;
  const auto& blk = model.blocks[static_cast<std::size_t>(layer)];
  const Eigen::Index T = x.rows();
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix a;
  detail::apply_norm(cfg, blk.ln_attn, x, a);
  Matrix q = a * blk.attn.wq;
  Matrix k = a * blk.attn.wk;
  Matrix v = a * blk.attn.wv;
  detail::add_bias(q, blk.attn.bq);
  detail::add_bias(k, blk.attn.bk);
  detail::add_bias(v, blk.attn.bv);
  if (cfg.pos_kind == PosKind::rotary) {
    for (int h = 0; h < H; ++h) {
      detail::apply_rotary(q, h * dh, dh, cfg.rope_base);
      detail::apply_rotary(k, h * dh, dh, cfg.rope_base);
    }
  }

  Matrix mixed = Matrix::Zero(T, cfg.d_model);
  if (attn_out) attn_out->assign(static_cast<std::size_t>(H), Matrix());
  const float neg_inf = -std::numeric_limits<float>::infinity();
  for (int h = 0; h < H; ++h) {
    Matrix scores = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < T; ++i)
      for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = neg_inf;
    const auto* removed = (edits && edits->any) ? &edits->per_head[static_cast<std::size_t>(h)] : nullptr;
    if (removed && mode == InterventionMode::mask_pre_softmax) {
      for (const auto& [qi, ki] : *removed) scores(qi, ki) = neg_inf;
    }
    for (Eigen::Index i = 0; i < T; ++i) {
      const float mx = scores.row(i).maxCoeff();
      if (mx == neg_inf) {
        scores.row(i).setZero();  // every key masked: the row contributes nothing
        continue;
      }
      float sum = 0.0f;
      for (Eigen::Index j = 0; j < T; ++j) {
        const float e = scores(i, j) == neg_inf ? 0.0f : std::exp(scores(i, j) - mx);
        scores(i, j) = e;
        sum += e;
      }
      scores.row(i) /= sum;
    }
    if (removed && mode == InterventionMode::zero_post_softmax) {
      for (const auto& [qi, ki] : *removed) scores(qi, ki) = 0.0f;
    }
    mixed.middleCols(h * dh, dh) = scores * v.middleCols(h * dh, dh);
    if (attn_out) (*attn_out)[static_cast<std::size_t>(h)] = std::move(scores);
  }
  Matrix attn_proj = mixed * blk.attn.wo;
  detail::add_bias(attn_proj, blk.attn.bo);
  x += attn_proj;

  if (cfg.mlp_kind == MlpKind::none) return;
  Matrix m;
  detail::apply_norm(cfg, blk.ln_mlp, x, m);
  Matrix hmid = m * blk.mlp.w_in;
  detail::add_bias(hmid, blk.mlp.b_in);
  if (cfg.mlp_kind == MlpKind::gelu) {
    hmid = hmid.unaryExpr([](float z) { return detail::gelu_tanh(z); });
  } else {
    Matrix gate = m * blk.mlp.w_gate;
    hmid = gate.unaryExpr([](float z) { return detail::silu(z); }).cwiseProduct(hmid);
  }
  Matrix out = hmid * blk.mlp.w_out;
  detail::add_bias(out, blk.mlp.b_out);
  x += out;
}

// Logits (final norm + unembedding) for every row of a hidden-state matrix.
inline Matrix unembed_rows(const Model& model, const Matrix& hidden, bool apply_final_norm = true) {
  if (!apply_final_norm) return hidden * model.unembedding;
  Matrix normed;
  detail::apply_norm(model.config, model.final_norm, hidden, normed);
  return normed * model.unembedding;
}

inline ForwardTrace forward(const Model& model, std::span<const int> tokens, const InterventionSpec& spec = {},
                            const ForwardOptions& opts = {}) {
  check_tokens(model, tokens);
  const auto& cfg = model.config;
  spec.validate(cfg, static_cast<int>(tokens.size()));
  const int n_blocks = opts.n_blocks < 0 ? cfg.n_layers : std::min(opts.n_blocks, cfg.n_layers);

  ForwardTrace trace;
  trace.applied_spec = spec;
  Matrix x = embed(model, tokens);
  if (opts.record_hidden) trace.hidden.push_back(x);
  const auto edits = detail::group_edits(spec, cfg);
  if (opts.record_attention) trace.attn.resize(static_cast<std::size_t>(n_blocks));
  for (int l = 0; l < n_blocks; ++l) {
    run_block(model, l, x, &edits[static_cast<std::size_t>(l)], spec.mode,
              opts.record_attention ? &trace.attn[static_cast<std::size_t>(l)] : nullptr);
    if (opts.record_hidden) trace.hidden.push_back(x);
  }
  if (opts.compute_logits && n_blocks == cfg.n_layers) trace.logits = unembed_rows(model, x);
  return trace;
}

inline ForwardTrace forward(const Model& model, const std::vector<int>& tokens, const InterventionSpec& spec = {},
                            const ForwardOptions& opts = {}) {
  return forward(model, std::span<const int>(tokens), spec, opts);
}

// Plain forward with no taps and no intervention: logits only.
inline Matrix forward_logits(const Model& model, std::span<const int> tokens) {
  check_tokens(model, tokens);
  Matrix x = embed(model, tokens);
  for (int l = 0; l < model.config.n_layers; ++l) run_block(model, l, x, nullptr, InterventionMode::zero_post_softmax, nullptr);
  return unembed_rows(model, x);
}

// Hidden states for blocks [0, n_blocks) only; upper blocks are never executed.
inline std::vector<Matrix> forward_truncated(const Model& model, std::span<const int> tokens, int n_blocks) {
  if (n_blocks < 0 || n_blocks > model.config.n_layers) throw ArgumentError("forward_truncated: cutoff out of range");
  ForwardOptions opts;
  opts.record_attention = false;
  opts.compute_logits = false;
  opts.n_blocks = n_blocks;
  return forward(model, tokens, {}, opts).hidden;
}

// Logits for a single hidden vector (final norm, then unembedding).
inline VectorD unembed(const Model& model, const Eigen::Ref<const Vector>& h, bool apply_final_norm = true) {
  if (h.size() != model.config.d_model) throw ArgumentError("unembed: hidden vector has wrong dimension");
  Matrix row = h.transpose();
  return unembed_rows(model, row, apply_final_norm).row(0).transpose().cast<double>();
}

// Vocabulary distribution decoded from a hidden vector: final norm, unembedding, softmax.
inline std::vector<double> logits_from_hidden(const Model& model, const Eigen::Ref<const Vector>& h,
                                              bool apply_final_norm = true) {
  const VectorD logits = unembed(model, h, apply_final_norm);
  return softmax(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())));
}

// Position-independent bilinear form W_Q^h^T W_K^h of one head (d_model x d_model),
// so that the pre-scale attention score between residual vectors x_q, x_k is
// x_q^T K x_k (biases and rotary phases excluded).
inline MatrixD qk_kernel(const Model& model, int layer, int head) {
  const auto& cfg = model.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw ArgumentError("qk_kernel: head index out of range");
  }
  const auto& a = model.blocks[static_cast<std::size_t>(layer)].attn;
  const MatrixD wq = a.wq.middleCols(head * cfg.d_head, cfg.d_head).cast<double>();
  const MatrixD wk = a.wk.middleCols(head * cfg.d_head, cfg.d_head).cast<double>();
  return wq * wk.transpose();
}

// ---------------------------------------------------------------------------
// Loading / saving

namespace detail {

inline std::string shape_str(const std::vector<std::int64_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

class TensorSource {
 public:
  TensorSource(const SafetensorsArchive& ar, std::string prefix) : ar_(ar), prefix_(std::move(prefix)) {}

  const NamedTensor& get(const std::string& name, std::vector<std::int64_t> expect) const {
    const std::string full = resolve(name);
    const auto& t = ar_.at(full);
    if (t.shape != expect) {
      throw LoadError("shape mismatch for tensor " + full + ": expected " + shape_str(expect) + ", got " +
                      shape_str(t.shape));
    }
    return t;
  }

  bool has(const std::string& name) const { return ar_.contains(prefix_ + name) || ar_.contains(name); }

  Matrix matrix(const std::string& name, std::int64_t rows, std::int64_t cols) const {
    const auto& t = get(name, {rows, cols});
    return Eigen::Map<const Matrix>(t.data.data(), rows, cols);
  }

  // Stored out x in (torch Linear); returned as in x out.
  Matrix linear(const std::string& name, std::int64_t in, std::int64_t out) const {
    const auto& t = get(name, {out, in});
    return Eigen::Map<const Matrix>(t.data.data(), out, in).transpose();
  }

  Vector vec(const std::string& name, std::int64_t n) const {
    const auto& t = get(name, {n});
    return Eigen::Map<const Vector>(t.data.data(), n);
  }

 private:
  std::string resolve(const std::string& name) const {
    if (ar_.contains(prefix_ + name)) return prefix_ + name;
    if (ar_.contains(name)) return name;
    throw LoadError("missing tensor: " + prefix_ + name);
  }

  const SafetensorsArchive& ar_;
  std::string prefix_;
};

inline NormWeights load_norm(const TensorSource& src, const ModelConfig& cfg, const std::string& base) {
  NormWeights n;
  if (cfg.norm_kind == NormKind::none) return n;
  n.weight = src.vec(base + ".weight", cfg.d_model);
  if (cfg.norm_kind == NormKind::layernorm) {
    n.bias = cfg.bias || src.has(base + ".bias") ? src.vec(base + ".bias", cfg.d_model) : Vector::Zero(cfg.d_model);
  }
  return n;
}

inline Model load_gpt2_layout(const SafetensorsArchive& ar, const ModelConfig& cfg) {
  const std::string prefix = ar.contains("transformer.wte.weight") ? "transformer." : "";
  const TensorSource src(ar, prefix);
  const int d = cfg.d_model;
  const int ff = cfg.ff_dim();
  Model m;
  m.config = cfg;
  m.token_embedding = src.matrix("wte.weight", cfg.vocab_size, d);
  if (cfg.pos_kind == PosKind::learned) m.position_embedding = src.matrix("wpe.weight", cfg.max_seq, d);
  if (cfg.pos_kind == PosKind::rotary) throw LoadError("gpt2 layout does not support rotary positions");
  if (cfg.mlp_kind == MlpKind::silu_gated) throw LoadError("gpt2 layout does not support gated MLPs");
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "h." + std::to_string(l) + ".";
    Block blk;
    blk.ln_attn = load_norm(src, cfg, b + "ln_1");
    blk.ln_mlp = load_norm(src, cfg, b + "ln_2");
    const Matrix qkv = src.matrix(b + "attn.c_attn.weight", d, 3 * d);
    blk.attn.wq = qkv.leftCols(d);
    blk.attn.wk = qkv.middleCols(d, d);
    blk.attn.wv = qkv.rightCols(d);
    blk.attn.wo = src.matrix(b + "attn.c_proj.weight", d, d);
    if (cfg.bias) {
      const Vector bqkv = src.vec(b + "attn.c_attn.bias", 3 * d);
      blk.attn.bq = bqkv.head(d);
      blk.attn.bk = bqkv.segment(d, d);
      blk.attn.bv = bqkv.tail(d);
      blk.attn.bo = src.vec(b + "attn.c_proj.bias", d);
    }
    if (cfg.mlp_kind == MlpKind::gelu) {
      blk.mlp.w_in = src.matrix(b + "mlp.c_fc.weight", d, ff);
      blk.mlp.w_out = src.matrix(b + "mlp.c_proj.weight", ff, d);
      if (cfg.bias) {
        blk.mlp.b_in = src.vec(b + "mlp.c_fc.bias", ff);
        blk.mlp.b_out = src.vec(b + "mlp.c_proj.bias", d);
      }
    }
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = load_norm(src, cfg, "ln_f");
  if (cfg.tie_embeddings) {
    m.unembedding = m.token_embedding.transpose();
  } else {
    m.unembedding = src.matrix("lm_head.weight", cfg.vocab_size, d).transpose();
  }
  return m;
}

inline Model load_llama_layout(const SafetensorsArchive& ar, const ModelConfig& cfg) {
  const TensorSource src(ar, "model.");
  const int d = cfg.d_model;
  const int ff = cfg.ff_dim();
  Model m;
  m.config = cfg;
  m.token_embedding = src.matrix("embed_tokens.weight", cfg.vocab_size, d);
  if (cfg.pos_kind == PosKind::learned) m.position_embedding = src.matrix("embed_positions.weight", cfg.max_seq, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "layers." + std::to_string(l) + ".";
    Block blk;
    blk.ln_attn = load_norm(src, cfg, b + "input_layernorm");
    blk.ln_mlp = load_norm(src, cfg, b + "post_attention_layernorm");
    blk.attn.wq = src.linear(b + "self_attn.q_proj.weight", d, d);
    blk.attn.wk = src.linear(b + "self_attn.k_proj.weight", d, d);
    blk.attn.wv = src.linear(b + "self_attn.v_proj.weight", d, d);
    blk.attn.wo = src.linear(b + "self_attn.o_proj.weight", d, d);
    if (cfg.bias) {
      blk.attn.bq = src.vec(b + "self_attn.q_proj.bias", d);
      blk.attn.bk = src.vec(b + "self_attn.k_proj.bias", d);
      blk.attn.bv = src.vec(b + "self_attn.v_proj.bias", d);
      blk.attn.bo = src.vec(b + "self_attn.o_proj.bias", d);
    }
    if (cfg.mlp_kind == MlpKind::silu_gated) {
      blk.mlp.w_gate = src.linear(b + "mlp.gate_proj.weight", d, ff);
      blk.mlp.w_in = src.linear(b + "mlp.up_proj.weight", d, ff);
      blk.mlp.w_out = src.linear(b + "mlp.down_proj.weight", ff, d);
    } else if (cfg.mlp_kind == MlpKind::gelu) {
      blk.mlp.w_in = src.linear(b + "mlp.up_proj.weight", d, ff);
      blk.mlp.w_out = src.linear(b + "mlp.down_proj.weight", ff, d);
      if (cfg.bias) {
        blk.mlp.b_in = src.vec(b + "mlp.up_proj.bias", ff);
        blk.mlp.b_out = src.vec(b + "mlp.down_proj.bias", d);
      }
    }
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = load_norm(src, cfg, "norm");
  if (cfg.tie_embeddings) {
    m.unembedding = m.token_embedding.transpose();
  } else {
    const TensorSource root(ar, "");
    m.unembedding = root.matrix("lm_head.weight", cfg.vocab_size, d).transpose();
  }
  return m;
}

inline NamedTensor to_named(const Matrix& m) {
  NamedTensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

inline NamedTensor to_named_linear(const Matrix& in_out) {
  const Matrix out_in = in_out.transpose();
  return to_named(out_in);
}

inline NamedTensor to_named(const Vector& v) {
  NamedTensor t;
  t.shape = {v.size()};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

}  // namespace detail

inline ModelConfig load_model_config(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw LoadError("cannot open model config: " + config_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed model config " + config_path + ": " + e.what());
  }
  auto cfg = model_config_from_json(j);
  cfg.validate();
  return cfg;
}

inline Model load_model(const SafetensorsArchive& archive, const ModelConfig& cfg) {
  cfg.validate();
  return cfg.layout == "llama" ? detail::load_llama_layout(archive, cfg) : detail::load_gpt2_layout(archive, cfg);
}

inline Model load_model(const std::string& archive_path, const std::string& config_path) {
  const auto cfg = load_model_config(config_path);
  return load_model(SafetensorsArchive::load(archive_path), cfg);
}

// Tensor map in the model's configured layout.
inline std::map<std::string, NamedTensor> model_tensors(const Model& m) {
  using detail::to_named;
  using detail::to_named_linear;
  const auto& cfg = m.config;
  std::map<std::string, NamedTensor> t;
  auto put_norm = [&](const std::string& base, const NormWeights& n) {
    if (cfg.norm_kind == NormKind::none) return;
    t[base + ".weight"] = to_named(n.weight);
    if (cfg.norm_kind == NormKind::layernorm && cfg.bias) t[base + ".bias"] = to_named(n.bias);
  };
  if (cfg.layout == "gpt2") {
    t["wte.weight"] = to_named(m.token_embedding);
    if (cfg.pos_kind == PosKind::learned) t["wpe.weight"] = to_named(m.position_embedding);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& blk = m.blocks[static_cast<std::size_t>(l)];
      const std::string b = "h." + std::to_string(l) + ".";
      put_norm(b + "ln_1", blk.ln_attn);
      put_norm(b + "ln_2", blk.ln_mlp);
      Matrix qkv(cfg.d_model, 3 * cfg.d_model);
      qkv << blk.attn.wq, blk.attn.wk, blk.attn.wv;
      t[b + "attn.c_attn.weight"] = to_named(qkv);
      t[b + "attn.c_proj.weight"] = to_named(blk.attn.wo);
      if (cfg.bias) {
        Vector bqkv(3 * cfg.d_model);
        bqkv << blk.attn.bq, blk.attn.bk, blk.attn.bv;
        t[b + "attn.c_attn.bias"] = to_named(bqkv);
        t[b + "attn.c_proj.bias"] = to_named(blk.attn.bo);
      }
      if (cfg.mlp_kind == MlpKind::gelu) {
        t[b + "mlp.c_fc.weight"] = to_named(blk.mlp.w_in);
        t[b + "mlp.c_proj.weight"] = to_named(blk.mlp.w_out);
        if (cfg.bias) {
          t[b + "mlp.c_fc.bias"] = to_named(blk.mlp.b_in);
          t[b + "mlp.c_proj.bias"] = to_named(blk.mlp.b_out);
        }
      }
    }
    put_norm("ln_f", m.final_norm);
    if (!cfg.tie_embeddings) t["lm_head.weight"] = to_named(Matrix(m.unembedding.transpose()));
  } else {
    t["model.embed_tokens.weight"] = to_named(m.token_embedding);
    if (cfg.pos_kind == PosKind::learned) t["model.embed_positions.weight"] = to_named(m.position_embedding);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& blk = m.blocks[static_cast<std::size_t>(l)];
      const std::string b = "model.layers." + std::to_string(l) + ".";
      put_norm(b + "input_layernorm", blk.ln_attn);
      put_norm(b + "post_attention_layernorm", blk.ln_mlp);
      t[b + "self_attn.q_proj.weight"] = to_named_linear(blk.attn.wq);
      t[b + "self_attn.k_proj.weight"] = to_named_linear(blk.attn.wk);
      t[b + "self_attn.v_proj.weight"] = to_named_linear(blk.attn.wv);
      t[b + "self_attn.o_proj.weight"] = to_named_linear(blk.attn.wo);
      if (cfg.bias) {
        t[b + "self_attn.q_proj.bias"] = to_named(blk.attn.bq);
        t[b + "self_attn.k_proj.bias"] = to_named(blk.attn.bk);
        t[b + "self_attn.v_proj.bias"] = to_named(blk.attn.bv);
        t[b + "self_attn.o_proj.bias"] = to_named(blk.attn.bo);
      }
      if (cfg.mlp_kind == MlpKind::silu_gated) {
        t[b + "mlp.gate_proj.weight"] = to_named_linear(blk.mlp.w_gate);
      }
      if (cfg.mlp_kind != MlpKind::none) {
        t[b + "mlp.up_proj.weight"] = to_named_linear(blk.mlp.w_in);
        t[b + "mlp.down_proj.weight"] = to_named_linear(blk.mlp.w_out);
        if (cfg.mlp_kind == MlpKind::gelu && cfg.bias) {
          t[b + "mlp.up_proj.bias"] = to_named(blk.mlp.b_in);
          t[b + "mlp.down_proj.bias"] = to_named(blk.mlp.b_out);
        }
      }
    }
    put_norm("model.norm", m.final_norm);
    if (!cfg.tie_embeddings) t["lm_head.weight"] = to_named(Matrix(m.unembedding.transpose()));
  }
  return t;
}

// Writes <dir>/config.json and <dir>/model.safetensors.
inline void save_model(const Model& m, const std::string& dir, StoreDtype dtype = StoreDtype::f32) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = m.config;
  std::ofstream(dir + "/config.json") << j.dump(2) << "\n";
  write_safetensors(dir + "/model.safetensors", model_tensors(m), {{"format", "pt"}}, dtype);
}

}  // namespace iclc
