#pragma once

// ICL prompt assembly with exact token-role spans.
//
// An input is laid out as
//   [bos] { [prefix_i][text_i][forerunner_i][label_i][delimiter_i] }*k [prefix_q][text_q][forerunner_q] ([label_q])
// Each fragment is tokenized on its own so every token belongs to exactly one span.

#include "iclc/errors.hpp"
#include "iclc/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace iclc {

struct LabeledExample {
  std::string text;
  int label = 0;
  int id = -1;  // 0-based record index in the source file
};

inline std::vector<LabeledExample> parse_dataset(std::istream& in, const std::vector<std::string>& label_space) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw ParseError("malformed JSON record", line_no);
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("label") || !j.at("text").is_string()) {
      throw ParseError("record needs string \"text\" and \"label\" fields", line_no);
    }
    LabeledExample ex;
    ex.text = j.at("text").get<std::string>();
    const auto& lab = j.at("label");
    if (lab.is_string()) {
      const auto it = std::find(label_space.begin(), label_space.end(), lab.get<std::string>());
      if (it == label_space.end()) throw ParseError("unknown label '" + lab.get<std::string>() + "'", line_no);
      ex.label = static_cast<int>(it - label_space.begin());
    } else if (lab.is_number_integer()) {
      ex.label = lab.get<int>();
      if (ex.label < 0 || ex.label >= static_cast<int>(label_space.size())) {
        throw ParseError("label index out of range: " + std::to_string(ex.label), line_no);
      }
    } else {
      throw ParseError("label must be a name or an index", line_no);
    }
    ex.id = static_cast<int>(out.size());
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<LabeledExample> load_dataset(const std::string& path, const std::vector<std::string>& label_space) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset: " + path);
  return parse_dataset(in, label_space);
}

// ---------------------------------------------------------------------------
// Templates

struct Template {
  std::string name;
  std::string input_prefix = "sentence: ";
  std::string forerunner = " sentiment:";
  std::string unit_suffix = "\n";
  std::vector<std::string> labels;            // label names, index = label id
  std::vector<std::string> label_verbalizer;  // surface string per label id
  bool forerunner_from_text = false;          // set when the forerunner fragment is empty

  int n_labels() const { return static_cast<int>(labels.size()); }
};

inline void to_json(nlohmann::json& j, const Template& t) {
  j = nlohmann::json{{"name", t.name},
                     {"input_prefix", t.input_prefix},
                     {"forerunner", t.forerunner},
                     {"unit_suffix", t.unit_suffix},
                     {"labels", t.labels},
                     {"label_verbalizer", t.label_verbalizer},
                     {"forerunner_from_text", t.forerunner_from_text}};
}

inline Template template_from_json(const nlohmann::json& j) {
  Template t;
  try {
    t.name = j.value("name", std::string());
    t.input_prefix = j.at("input_prefix").get<std::string>();
    t.forerunner = j.at("forerunner").get<std::string>();
    t.unit_suffix = j.at("unit_suffix").get<std::string>();
    t.labels = j.at("labels").get<std::vector<std::string>>();
    const auto& v = j.at("label_verbalizer");
    if (v.is_object()) {
      for (const auto& name : t.labels) t.label_verbalizer.push_back(v.at(name).get<std::string>());
    } else {
      t.label_verbalizer = v.get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw TemplateError(std::string("malformed template: ") + e.what());
  }
  if (t.labels.empty()) throw TemplateError("template has an empty label space");
  if (t.labels.size() != t.label_verbalizer.size()) throw TemplateError("labels and label_verbalizer differ in length");
  t.forerunner_from_text = t.forerunner.empty();
  return t;
}

inline Template load_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TemplateError("cannot open template: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw TemplateError("malformed template " + path + ": " + e.what());
  }
  return template_from_json(j);
}

// Token id of a verbalizer string; throws unless it is exactly one token.
inline int single_token(const Tokenizer& tok, const std::string& s) {
  const auto ids = tok.encode(s);
  if (ids.size() != 1) {
    throw TemplateError("label verbalizer '" + s + "' tokenizes to " + std::to_string(ids.size()) +
                        " tokens; exactly one is required");
  }
  return ids[0];
}

inline void validate_template(const Tokenizer& tok, const Template& t) {
  if (t.labels.empty()) throw TemplateError("template has an empty label space");
  if (t.labels.size() != t.label_verbalizer.size()) throw TemplateError("labels and label_verbalizer differ in length");
  std::vector<int> ids;
  for (const auto& v : t.label_verbalizer) ids.push_back(single_token(tok, v));
  auto sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw TemplateError("two labels share the same verbalizer token");
  }
}

enum class TemplateEdit { drop_newline, drop_colon, drop_prefixes, drop_all, replace_colon };

struct TemplateModification {
  TemplateEdit kind = TemplateEdit::drop_newline;
  std::string replacement;  // replace_colon only

  static TemplateModification parse(const std::string& s) {
    if (s == "drop-newline") return {TemplateEdit::drop_newline, {}};
    if (s == "drop-colon") return {TemplateEdit::drop_colon, {}};
    if (s == "drop-prefixes") return {TemplateEdit::drop_prefixes, {}};
    if (s == "drop-all") return {TemplateEdit::drop_all, {}};
    const std::string head = "replace-colon(";
    if (s.rfind(head, 0) == 0 && s.size() > head.size() && s.back() == ')') {
      return {TemplateEdit::replace_colon, s.substr(head.size(), s.size() - head.size() - 1)};
    }
    throw ConfigError("unknown template modification: " + s);
  }

  std::string str() const {
    switch (kind) {
      case TemplateEdit::drop_newline: return "drop-newline";
      case TemplateEdit::drop_colon: return "drop-colon";
      case TemplateEdit::drop_prefixes: return "drop-prefixes";
      case TemplateEdit::drop_all: return "drop-all";
      case TemplateEdit::replace_colon: return "replace-colon(" + replacement + ")";
    }
    return "?";
  }
};

namespace detail {
inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  if (from.empty()) return s;
  std::string out;
  std::size_t pos = 0;
  for (std::size_t hit; (hit = s.find(from, pos)) != std::string::npos; pos = hit + from.size()) {
    out.append(s, pos, hit - pos);
    out += to;
  }
  out.append(s, pos);
  return out;
}
}  // namespace detail

inline Template modify_template(Template t, const TemplateModification& mod) {
  auto drop_newline = [&] { t.unit_suffix = detail::replace_all(t.unit_suffix, "\n", ""); };
  auto drop_prefixes = [&] {
    t.input_prefix.clear();
    t.forerunner.clear();
  };
  switch (mod.kind) {
    case TemplateEdit::drop_newline: drop_newline(); break;
    case TemplateEdit::drop_colon:
      t.input_prefix = detail::replace_all(t.input_prefix, ":", "");
      t.forerunner = detail::replace_all(t.forerunner, ":", "");
      break;
    case TemplateEdit::drop_prefixes: drop_prefixes(); break;
    case TemplateEdit::drop_all:
      drop_prefixes();
      drop_newline();
      break;
    case TemplateEdit::replace_colon:
      t.input_prefix = detail::replace_all(t.input_prefix, ":", mod.replacement);
      t.forerunner = detail::replace_all(t.forerunner, ":", mod.replacement);
      break;
  }
  t.forerunner_from_text = t.forerunner.empty();
  t.name += (t.name.empty() ? "" : "+") + mod.str();
  return t;
}

inline Template modify_template(const Tokenizer& tok, const Template& t, const TemplateModification& mod) {
  Template out = modify_template(t, mod);
  validate_template(tok, out);
  return out;
}

// ---------------------------------------------------------------------------
// Roles and spans

enum class Role {
  bos,
  demo_prefix,
  demo_text,
  demo_forerunner,
  demo_label,
  delimiter,
  query_prefix,
  query_text,
  query_forerunner,
  query_label
};

inline const char* role_name(Role r) {
  switch (r) {
    case Role::bos: return "bos";
    case Role::demo_prefix: return "demo_prefix";
    case Role::demo_text: return "demo_text";
    case Role::demo_forerunner: return "demo_forerunner";
    case Role::demo_label: return "demo_label";
    case Role::delimiter: return "delimiter";
    case Role::query_prefix: return "query_prefix";
    case Role::query_text: return "query_text";
    case Role::query_forerunner: return "query_forerunner";
    case Role::query_label: return "query_label";
  }
  return "?";
}

inline bool is_indexed(Role r) {
  return r == Role::demo_prefix || r == Role::demo_text || r == Role::demo_forerunner || r == Role::demo_label ||
         r == Role::delimiter;
}

inline Role parse_role(const std::string& s) {
  for (int r = 0; r <= static_cast<int>(Role::query_label); ++r) {
    if (s == role_name(static_cast<Role>(r))) return static_cast<Role>(r);
  }
  throw ArgumentError("unknown role: " + s);
}

// A role plus the demonstration index for per-demo roles ("demo_label(2)").
struct RoleRef {
  Role role = Role::query_forerunner;
  int index = -1;

  static RoleRef parse(const std::string& s) {
    const auto open = s.find('(');
    if (open == std::string::npos) {
      RoleRef r{parse_role(s), -1};
      if (is_indexed(r.role)) throw ArgumentError("role needs a demonstration index: " + s);
      return r;
    }
    if (s.back() != ')') throw ArgumentError("malformed role reference: " + s);
    RoleRef r{parse_role(s.substr(0, open)), std::stoi(s.substr(open + 1, s.size() - open - 2))};
    if (!is_indexed(r.role)) throw ArgumentError("role takes no index: " + s);
    return r;
  }

  std::string str() const {
    return is_indexed(role) ? std::string(role_name(role)) + "(" + std::to_string(index) + ")" : role_name(role);
  }
};

struct Span {
  Role role = Role::bos;
  int index = -1;  // demonstration index, -1 for non-demo roles
  int start = 0;
  int end = 0;  // exclusive
  int size() const { return end - start; }
};

enum class Pooling { last, first, all };

enum class Perturbation { none, wrong, abstract_labels, iwl_filtered };

inline const char* perturbation_name(Perturbation p) {
  switch (p) {
    case Perturbation::none: return "none";
    case Perturbation::wrong: return "wrong";
    case Perturbation::abstract_labels: return "abstract";
    case Perturbation::iwl_filtered: return "iwl-filtered";
  }
  return "?";
}

inline Perturbation parse_perturbation(const std::string& s) {
  if (s == "none") return Perturbation::none;
  if (s == "wrong") return Perturbation::wrong;
  if (s == "abstract") return Perturbation::abstract_labels;
  if (s == "iwl-filtered") return Perturbation::iwl_filtered;
  throw ConfigError("unknown label mode: " + s);
}

struct BuildOptions {
  std::optional<int> bos_id;
  bool augmented = false;  // append the query's true label token
};

struct IclInput {
  std::vector<int> tokens;
  std::vector<Span> spans;
  int k = 0;
  int n_labels = 0;
  std::vector<int> label_token_ids;  // active verbalizer token per label id
  std::vector<int> demo_shown;       // label id rendered for each demonstration
  std::vector<int> demo_truth;       // ground-truth label id of each demonstration
  int query_truth = 0;
  Perturbation perturbation = Perturbation::none;
  bool abstract_labels = false;

  // Build provenance, kept so perturbations can rebuild the input.
  std::vector<LabeledExample> demos;
  LabeledExample query;
  Template tmpl;
  BuildOptions options;

  int size() const { return static_cast<int>(tokens.size()); }

  std::vector<int> label_space() const {
    std::vector<int> ids(static_cast<std::size_t>(n_labels));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
  }

  const Span* find(Role role, int index = -1) const {
    for (const auto& s : spans)
      if (s.role == role && s.index == index) return &s;
    return nullptr;
  }

  const Span& span(const RoleRef& ref) const {
    const Span* s = find(ref.role, ref.index);
    if (!s) throw SpanError("span absent: " + ref.str());
    return *s;
  }

  std::vector<int> positions(const RoleRef& ref, Pooling pooling = Pooling::last) const {
    const Span& s = span(ref);
    switch (pooling) {
      case Pooling::last: return {s.end - 1};
      case Pooling::first: return {s.start};
      case Pooling::all: {
        std::vector<int> out(static_cast<std::size_t>(s.size()));
        std::iota(out.begin(), out.end(), s.start);
        return out;
      }
    }
    return {};
  }

  int position(const RoleRef& ref) const { return span(ref).end - 1; }

  int query_forerunner_pos() const { return position({Role::query_forerunner, -1}); }

  // Position of the label token of demonstration i.
  int label_pos(int i) const { return position({Role::demo_label, i}); }

  // Position of the last forerunner token of demonstration i.
  int forerunner_pos(int i) const { return position({Role::demo_forerunner, i}); }

  std::vector<int> label_positions() const {
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(label_pos(i));
    return out;
  }

  // Throws if spans are not ordered, disjoint, covering, or role-consistent.
  void check_invariants() const {
    int cursor = 0;
    for (const auto& s : spans) {
      if (s.start != cursor || s.end <= s.start) throw SpanError("spans are not contiguous and non-empty");
      cursor = s.end;
      if ((s.role == Role::demo_label || s.role == Role::query_label) && s.size() != 1) {
        throw SpanError("label span must hold exactly one token");
      }
    }
    if (cursor != size()) throw SpanError("spans do not cover the token sequence");
    if (!find(Role::query_forerunner)) throw SpanError("input has no query forerunner");
    for (int i = 0; i < k; ++i) {
      if (!find(Role::demo_label, i)) throw SpanError("missing label span for demonstration " + std::to_string(i));
    }
    if (perturbation == Perturbation::iwl_filtered) {
      for (int y : demo_shown)
        if (y == query_truth) throw SpanError("iwl-filtered input shows the query's true label");
    }
  }
};

inline void to_json(nlohmann::json& j, const IclInput& in) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : in.spans) {
    spans.push_back({{"role", role_name(s.role)}, {"index", s.index}, {"start", s.start}, {"end", s.end}});
  }
  nlohmann::json demos = nlohmann::json::array();
  for (const auto& d : in.demos) demos.push_back({{"text", d.text}, {"label", d.label}, {"id", d.id}});
  j = nlohmann::json{{"tokens", in.tokens},
                     {"spans", spans},
                     {"k", in.k},
                     {"n_labels", in.n_labels},
                     {"label_token_ids", in.label_token_ids},
                     {"demo_shown", in.demo_shown},
                     {"demo_truth", in.demo_truth},
                     {"query_truth", in.query_truth},
                     {"perturbation", perturbation_name(in.perturbation)},
                     {"abstract_labels", in.abstract_labels},
                     {"demos", demos},
                     {"query", {{"text", in.query.text}, {"label", in.query.label}, {"id", in.query.id}}},
                     {"template", in.tmpl},
                     {"augmented", in.options.augmented}};
  j["bos_id"] = in.options.bos_id ? nlohmann::json(*in.options.bos_id) : nlohmann::json(nullptr);
}

inline IclInput icl_input_from_json(const nlohmann::json& j) {
  IclInput in;
  try {
    in.tokens = j.at("tokens").get<std::vector<int>>();
    for (const auto& s : j.at("spans")) {
      in.spans.push_back({parse_role(s.at("role").get<std::string>()), s.at("index").get<int>(),
                          s.at("start").get<int>(), s.at("end").get<int>()});
    }
    in.k = j.at("k");
    in.n_labels = j.at("n_labels");
    in.label_token_ids = j.at("label_token_ids").get<std::vector<int>>();
    in.demo_shown = j.at("demo_shown").get<std::vector<int>>();
    in.demo_truth = j.at("demo_truth").get<std::vector<int>>();
    in.query_truth = j.at("query_truth");
    const std::string p = j.at("perturbation");
    in.perturbation = p == "wrong" ? Perturbation::wrong
                      : p == "abstract" ? Perturbation::abstract_labels
                      : p == "iwl-filtered" ? Perturbation::iwl_filtered
                                            : Perturbation::none;
    in.abstract_labels = j.value("abstract_labels", false);
    for (const auto& d : j.at("demos")) in.demos.push_back({d.at("text"), d.at("label"), d.value("id", -1)});
    const auto& q = j.at("query");
    in.query = {q.at("text"), q.at("label"), q.value("id", -1)};
    in.tmpl = template_from_json(j.at("template"));
    in.options.augmented = j.value("augmented", false);
    if (j.contains("bos_id") && !j.at("bos_id").is_null()) in.options.bos_id = j.at("bos_id").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed input record: ") + e.what());
  }
  return in;
}

// ---------------------------------------------------------------------------
// Assembly

struct Fragment {
  Role role;
  int index;
  std::string text;
  int fixed_token = -1;  // label fragments carry their verbalizer token directly
};

namespace detail {

inline bool starts_with_space(const std::string& s) {
  return !s.empty() && (s[0] == ' ' || s[0] == '\n' || s[0] == '\t' || s[0] == '\r');
}

// Trailing spaces of a fragment move to the front of the next text fragment
// unless that fragment already starts with whitespace, so words keep the
// leading-space form that byte-level BPE vocabularies are built around.
inline void shift_boundary_spaces(std::vector<Fragment>& frags) {
  for (std::size_t i = 0; i < frags.size(); ++i) {
    auto& f = frags[i];
    if (f.fixed_token >= 0 || f.text.empty() || f.text.back() != ' ') continue;
    std::size_t j = i + 1;
    while (j < frags.size() && frags[j].text.empty()) ++j;
    if (j == frags.size() || frags[j].fixed_token >= 0 || starts_with_space(frags[j].text)) continue;
    const std::size_t keep = f.text.find_last_not_of(' ') + 1;
    frags[j].text = f.text.substr(keep) + frags[j].text;
    f.text.erase(keep);
  }
}

}  // namespace detail

// Tokenizes fragments independently and records one span per non-empty fragment.
// When `forerunner_from_text` is set, forerunner fragments are empty and the last
// token of the preceding text fragment is re-labelled as the forerunner.
inline void assemble_fragments(const Tokenizer& tok, std::vector<Fragment> frags, bool forerunner_from_text,
                               std::vector<int>& tokens, std::vector<Span>& spans) {
  detail::shift_boundary_spaces(frags);
  for (const auto& f : frags) {
    const bool is_forerunner = f.role == Role::demo_forerunner || f.role == Role::query_forerunner;
    if (is_forerunner && forerunner_from_text) {
      // Split the last token off the preceding text span.
      if (spans.empty() || (spans.back().role != Role::demo_text && spans.back().role != Role::query_text) ||
          spans.back().index != f.index) {
        throw SpanError("cannot derive forerunner: no input text precedes it");
      }
      Span& text = spans.back();
      const Span fr{f.role, f.index, text.end - 1, text.end};
      text.end -= 1;
      if (text.size() == 0) spans.pop_back();
      spans.push_back(fr);
      continue;
    }
    std::vector<int> ids;
    if (f.fixed_token >= 0) {
      ids.push_back(f.fixed_token);
    } else {
      ids = tok.encode(f.text);
    }
    if (ids.empty()) continue;
    const int start = static_cast<int>(tokens.size());
    tokens.insert(tokens.end(), ids.begin(), ids.end());
    spans.push_back({f.role, f.index, start, static_cast<int>(tokens.size())});
  }
}

inline std::string abstract_label(int label_id) {
  if (label_id < 0 || label_id >= 26) throw ArgumentError("abstract labels support at most 26 classes");
  return std::string(" ") + static_cast<char>('A' + label_id);
}

// Fragment list for an input; `shown` gives the displayed label of each demo.
inline std::vector<Fragment> input_fragments(const std::vector<LabeledExample>& demos, const LabeledExample& query,
                                             const Template& t, const std::vector<int>& shown,
                                             const std::vector<int>& label_tokens, bool augmented) {
  std::vector<Fragment> frags;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    const int idx = static_cast<int>(i);
    frags.push_back({Role::demo_prefix, idx, t.input_prefix});
    frags.push_back({Role::demo_text, idx, demos[i].text});
    frags.push_back({Role::demo_forerunner, idx, t.forerunner});
    frags.push_back({Role::demo_label, idx, "", label_tokens[static_cast<std::size_t>(shown[i])]});
    frags.push_back({Role::delimiter, idx, t.unit_suffix});
  }
  frags.push_back({Role::query_prefix, -1, t.input_prefix});
  frags.push_back({Role::query_text, -1, query.text});
  frags.push_back({Role::query_forerunner, -1, t.forerunner});
  if (augmented) frags.push_back({Role::query_label, -1, "", label_tokens[static_cast<std::size_t>(query.label)]});
  return frags;
}

inline IclInput build_icl_input_shown(const Tokenizer& tok, const std::vector<LabeledExample>& demos,
                                      const LabeledExample& query, const Template& t, const BuildOptions& opts,
                                      const std::vector<int>& shown, bool abstract_labels) {
  if (t.labels.empty()) throw TemplateError("template has an empty label space");
  if (shown.size() != demos.size()) throw ArgumentError("one displayed label per demonstration is required");
  const int n_labels = t.n_labels();
  auto check_label = [&](int y) {
    if (y < 0 || y >= n_labels) throw ArgumentError("label id outside the label space: " + std::to_string(y));
  };
  for (const auto& d : demos) check_label(d.label);
  for (int y : shown) check_label(y);
  check_label(query.label);

  IclInput in;
  in.k = static_cast<int>(demos.size());
  in.n_labels = n_labels;
  in.abstract_labels = abstract_labels;
  for (int y = 0; y < n_labels; ++y) {
    const std::string surface = abstract_labels ? abstract_label(y) : t.label_verbalizer[static_cast<std::size_t>(y)];
    in.label_token_ids.push_back(single_token(tok, surface));
  }
  in.demo_shown = shown;
  for (const auto& d : demos) in.demo_truth.push_back(d.label);
  in.query_truth = query.label;
  in.demos = demos;
  in.query = query;
  in.tmpl = t;
  in.options = opts;

  if (opts.bos_id) {
    in.tokens.push_back(*opts.bos_id);
    in.spans.push_back({Role::bos, -1, 0, 1});
  }
  assemble_fragments(tok, input_fragments(demos, query, t, shown, in.label_token_ids, opts.augmented),
                     t.forerunner.empty(), in.tokens, in.spans);
  in.check_invariants();
  return in;
}

inline IclInput build_icl_input(const Tokenizer& tok, const std::vector<LabeledExample>& demos,
                                const LabeledExample& query, const Template& t, const BuildOptions& opts = {}) {
  std::vector<int> shown;
  for (const auto& d : demos) shown.push_back(d.label);
  return build_icl_input_shown(tok, demos, query, t, opts, shown, false);
}

// Untokenized prompt text (BOS excluded) with the displayed labels.
inline std::string prompt_text(const IclInput& in) {
  const auto& t = in.tmpl;
  std::string s;
  for (int i = 0; i < in.k; ++i) {
    const int y = in.demo_shown[static_cast<std::size_t>(i)];
    s += t.input_prefix + in.demos[static_cast<std::size_t>(i)].text + t.forerunner;
    s += in.abstract_labels ? abstract_label(y) : t.label_verbalizer[static_cast<std::size_t>(y)];
    s += t.unit_suffix;
  }
  s += t.input_prefix + in.query.text + t.forerunner;
  if (in.options.augmented) {
    s += in.abstract_labels ? abstract_label(in.query.label)
                            : t.label_verbalizer[static_cast<std::size_t>(in.query.label)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Demonstration sampling and perturbation

// Samples k demonstrations without replacement, skipping `exclude_id`.
// Class-balanced when the label count divides k, uniform otherwise.
template <typename Rng>
std::vector<LabeledExample> sample_demos(const std::vector<LabeledExample>& pool, int k, int n_labels, Rng& rng,
                                         int exclude_id = -1) {
  if (k < 0) throw ArgumentError("k must be >= 0");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].id != exclude_id || exclude_id < 0) eligible.push_back(i);
  std::vector<LabeledExample> out;
  auto draw = [&](std::vector<std::size_t> cand, int count) {
    if (static_cast<int>(cand.size()) < count) throw ArgumentError("not enough examples to sample demonstrations");
    for (int i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(i), cand.size() - 1);
      std::swap(cand[static_cast<std::size_t>(i)], cand[d(rng)]);
      out.push_back(pool[cand[static_cast<std::size_t>(i)]]);
    }
  };
  if (n_labels > 0 && k > 0 && k % n_labels == 0) {
    for (int y = 0; y < n_labels; ++y) {
      std::vector<std::size_t> cand;
      for (auto i : eligible)
        if (pool[i].label == y) cand.push_back(i);
      draw(cand, k / n_labels);
    }
    std::shuffle(out.begin(), out.end(), rng);
  } else {
    draw(eligible, k);
  }
  return out;
}

// `pool` is needed only for iwl-filtered mode (demonstrations are redrawn from it).
template <typename Rng>
IclInput perturb_labels(const Tokenizer& tok, const IclInput& in, Perturbation mode, Rng& rng,
                        const std::vector<LabeledExample>& pool = {}) {
  switch (mode) {
    case Perturbation::none: return in;
    case Perturbation::wrong: {
      if (in.n_labels < 2) throw ArgumentError("wrong-label mode needs at least two labels");
      std::vector<int> shown;
      for (int truth : in.demo_truth) {
        std::uniform_int_distribution<int> d(0, in.n_labels - 2);
        int y = d(rng);
        if (y >= truth) ++y;  // uniform over the other labels
        shown.push_back(y);
      }
      auto out = build_icl_input_shown(tok, in.demos, in.query, in.tmpl, in.options, shown, in.abstract_labels);
      out.perturbation = Perturbation::wrong;
      return out;
    }
    case Perturbation::abstract_labels: {
      if (in.n_labels > 26) throw ArgumentError("abstract labels unsupported for more than 26 classes");
      auto out = build_icl_input_shown(tok, in.demos, in.query, in.tmpl, in.options, in.demo_shown, true);
      out.perturbation = Perturbation::abstract_labels;
      return out;
    }
    case Perturbation::iwl_filtered: {
      std::vector<LabeledExample> filtered;
      for (const auto& ex : pool)
        if (ex.label != in.query_truth && ex.id != in.query.id) filtered.push_back(ex);
      auto demos = sample_demos(filtered, in.k, 0, rng);
      auto out = build_icl_input(tok, demos, in.query, in.tmpl, in.options);
      out.abstract_labels = in.abstract_labels;
      if (in.abstract_labels) {
        out = build_icl_input_shown(tok, demos, in.query, in.tmpl, in.options, out.demo_shown, true);
      }
      out.perturbation = Perturbation::iwl_filtered;
      out.check_invariants();
      return out;
    }
  }
  return in;
}

}  // namespace iclc
