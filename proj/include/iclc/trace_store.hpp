#pragma once

// Capture, persistence and role-indexed slicing of forward traces.
//
// On disk a bundle is <name>.bin (row-major f32 blobs, little-endian) plus
// <name>.json (shapes, offsets, the built input and the run manifest).

#include "iclc/errors.hpp"
#include "iclc/model.hpp"
#include "iclc/prompt.hpp"
#include "iclc/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace iclc {

struct TraceBundle {
  IclInput input;
  ForwardTrace trace;
  std::string model_tag;
  nlohmann::json manifest = nlohmann::json::object();  // seed, flags, anything the run wants recorded
};

inline TraceBundle capture(const Model& model, const IclInput& input, const InterventionSpec& spec = {},
                           bool record_attention = true, nlohmann::json manifest = nlohmann::json::object()) {
  ForwardOptions opts;
  opts.record_attention = record_attention;
  TraceBundle b;
  b.input = input;
  b.trace = forward(model, input.tokens, spec, opts);
  b.model_tag = model.config.tag;
  b.manifest = std::move(manifest);
  return b;
}

inline nlohmann::json spec_to_json(const InterventionSpec& spec) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : spec.edges) edges.push_back({e.layer, e.head, e.query, e.key});
  return {{"mode", to_string(spec.mode)}, {"edges", edges}};
}

inline InterventionSpec spec_from_json(const nlohmann::json& j) {
  InterventionSpec spec;
  spec.mode = j.value("mode", std::string("zero-post-softmax")) == "mask-pre-softmax"
                  ? InterventionMode::mask_pre_softmax
                  : InterventionMode::zero_post_softmax;
  for (const auto& e : j.value("edges", nlohmann::json::array())) {
    spec.add(e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>(), e.at(3).get<int>());
  }
  return spec;
}

struct SaveOptions {
  bool with_attention = true;
  bool with_logits = true;
};

inline void save_bundle(const TraceBundle& b, const std::string& dir, const std::string& name,
                        const SaveOptions& opts = {}) {
  std::filesystem::create_directories(dir);
  const auto& tr = b.trace;
  const int T = tr.n_tokens();
  if (T != b.input.size()) throw ArgumentError("trace length does not match input length");
  const int n_hidden = static_cast<int>(tr.hidden.size());
  const int d = n_hidden ? static_cast<int>(tr.hidden[0].cols()) : 0;
  const bool with_attn = opts.with_attention && !tr.attn.empty();
  const bool with_logits = opts.with_logits && tr.logits.size() > 0;
  const int n_heads = tr.attn.empty() ? 0 : static_cast<int>(tr.attn[0].size());

  std::ofstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot write trace blob: " + dir + "/" + name + ".bin");
  std::uint64_t offset = 0;
  nlohmann::json blobs = nlohmann::json::array();
  auto write = [&](const std::string& blob, const Matrix& m, std::vector<int> shape) {
    bin.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    blobs.push_back({{"name", blob}, {"offset", offset}, {"shape", shape}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(float);
  };
  for (int l = 0; l < n_hidden; ++l) write("hidden." + std::to_string(l), tr.hidden[static_cast<std::size_t>(l)], {T, d});
  if (with_attn) {
    for (std::size_t l = 0; l < tr.attn.size(); ++l)
      for (std::size_t h = 0; h < tr.attn[l].size(); ++h)
        write("attn." + std::to_string(l) + "." + std::to_string(h), tr.attn[l][h], {T, T});
  }
  if (with_logits) write("logits", tr.logits, {T, static_cast<int>(tr.logits.cols())});
  if (!bin) throw Error("failed writing trace blob for " + name);

  nlohmann::json input_json = b.input;
  nlohmann::json man = {{"format", "iclc-trace-v1"},
                        {"dtype", "f32"},
                        {"byte_order", "little"},
                        {"n_tokens", T},
                        {"n_hidden", n_hidden},
                        {"d_model", d},
                        {"n_attn_layers", with_attn ? static_cast<int>(tr.attn.size()) : 0},
                        {"n_heads", with_attn ? n_heads : 0},
                        {"has_logits", with_logits},
                        {"blobs", blobs},
                        {"hidden_indexing", "0 = embeddings, l = output of block l"},
                        {"model_tag", b.model_tag},
                        {"applied_spec", spec_to_json(tr.applied_spec)},
                        {"input", input_json},
                        {"manifest", b.manifest}};
  std::ofstream(dir + "/" + name + ".json") << man.dump(1) << "\n";
}

inline TraceBundle load_bundle(const std::string& dir, const std::string& name) {
  std::ifstream jin(dir + "/" + name + ".json");
  if (!jin) throw LoadError("cannot open trace manifest: " + dir + "/" + name + ".json");
  nlohmann::json man;
  try {
    jin >> man;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed trace manifest " + name + ": " + e.what());
  }
  std::ifstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw LoadError("cannot open trace blob: " + dir + "/" + name + ".bin");
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  auto read = [&](const nlohmann::json& blob) {
    const auto shape = blob.at("shape").get<std::vector<int>>();
    const auto off = blob.at("offset").get<std::uint64_t>();
    Matrix m(shape.at(0), shape.at(1));
    const std::size_t nbytes = static_cast<std::size_t>(m.size()) * sizeof(float);
    if (off + nbytes > bytes.size()) throw LoadError("trace blob truncated: " + blob.at("name").get<std::string>());
    std::memcpy(m.data(), bytes.data() + off, nbytes);
    return m;
  };

  TraceBundle b;
  b.input = icl_input_from_json(man.at("input"));
  b.model_tag = man.value("model_tag", std::string());
  b.manifest = man.value("manifest", nlohmann::json::object());
  b.trace.applied_spec = spec_from_json(man.at("applied_spec"));
  const int n_attn = man.at("n_attn_layers");
  const int n_heads = man.at("n_heads");
  b.trace.attn.assign(static_cast<std::size_t>(n_attn), std::vector<Matrix>(static_cast<std::size_t>(n_heads)));
  for (const auto& blob : man.at("blobs")) {
    const std::string nm = blob.at("name");
    if (nm.rfind("hidden.", 0) == 0) {
      b.trace.hidden.push_back(read(blob));
    } else if (nm.rfind("attn.", 0) == 0) {
      const auto dot = nm.find('.', 5);
      const int l = std::stoi(nm.substr(5, dot - 5));
      const int h = std::stoi(nm.substr(dot + 1));
      b.trace.attn.at(static_cast<std::size_t>(l)).at(static_cast<std::size_t>(h)) = read(blob);
    } else if (nm == "logits") {
      b.trace.logits = read(blob);
    }
  }
  if (b.trace.n_tokens() != b.input.size()) throw LoadError("trace length does not match input length: " + name);
  return b;
}

// ---------------------------------------------------------------------------
// Representation sets

struct RepSet {
  MatrixD reps;  // n x d
  std::vector<std::string> ids;
  int layer = 0;
  std::string role;
  std::string perturbation = "none";

  int n() const { return static_cast<int>(reps.rows()); }
  int dim() const { return static_cast<int>(reps.cols()); }

  void validate() const {
    if (!reps.allFinite()) throw ArgumentError("representation set contains NaN or Inf");
    if (static_cast<int>(ids.size()) != n()) throw ArgumentError("representation ids do not match row count");
  }
};

// Hidden state of `role` at `layer` for each bundle, one row per bundle in order.
// Multi-token roles pool by `pooling` (`all` averages the span).
inline RepSet extract_reps(std::span<const TraceBundle> bundles, int layer, const RoleRef& role,
                           Pooling pooling = Pooling::last) {
  RepSet rs;
  rs.layer = layer;
  rs.role = role.str();
  if (bundles.empty()) {
    rs.reps.resize(0, 0);
    return rs;
  }
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    if (layer < 0 || layer >= static_cast<int>(b.trace.hidden.size())) {
      throw ArgumentError("layer out of range: " + std::to_string(layer));
    }
    const Matrix& h = b.trace.hidden[static_cast<std::size_t>(layer)];
    if (i == 0) rs.reps.resize(static_cast<Eigen::Index>(bundles.size()), h.cols());
    const auto pos = b.input.positions(role, pooling);
    VectorD v = VectorD::Zero(h.cols());
    for (int p : pos) v += h.row(p).transpose().cast<double>();
    v /= static_cast<double>(pos.size());
    rs.reps.row(static_cast<Eigen::Index>(i)) = v.transpose();
    rs.ids.push_back(b.input.query.id >= 0 ? std::to_string(b.input.query.id) : std::to_string(i));
    rs.perturbation = perturbation_name(b.input.perturbation);
  }
  rs.validate();
  return rs;
}

inline RepSet extract_reps(const std::vector<TraceBundle>& bundles, int layer, const RoleRef& role,
                           Pooling pooling = Pooling::last) {
  return extract_reps(std::span<const TraceBundle>(bundles), layer, role, pooling);
}

// Applies the model's final norm to every row (the "normed" variant of hidden[l]).
inline RepSet normed(const Model& model, const RepSet& rs) {
  RepSet out = rs;
  Matrix in = rs.reps.cast<float>();
  Matrix nrm;
  detail::apply_norm(model.config, model.final_norm, in, nrm);
  out.reps = nrm.cast<double>();
  return out;
}

struct AttentionScore {
  int query = 0;
  int key = 0;
  double value = 0.0;
};

// Post-softmax scores attn[layer][head][q][k] for q in q_role, k in k_role
// (positions resolved with `pooling`); pairs with k > q are omitted.
inline std::vector<AttentionScore> attention_slice(const TraceBundle& b, int layer, int head, const RoleRef& q_role,
                                                   const RoleRef& k_role, Pooling pooling = Pooling::last) {
  if (layer < 0 || layer >= static_cast<int>(b.trace.attn.size())) throw ArgumentError("attention layer out of range");
  const auto& heads = b.trace.attn[static_cast<std::size_t>(layer)];
  if (head < 0 || head >= static_cast<int>(heads.size())) throw ArgumentError("attention head out of range");
  const Matrix& a = heads[static_cast<std::size_t>(head)];
  std::vector<AttentionScore> out;
  for (int q : b.input.positions(q_role, pooling)) {
    for (int k : b.input.positions(k_role, pooling)) {
      if (k <= q) out.push_back({q, k, static_cast<double>(a(q, k))});
    }
  }
  return out;
}

}  // namespace iclc
