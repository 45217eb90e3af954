#pragma once

// Hand-constructed 2-layer attention-only model with a planted induction circuit.
//
// Residual layout (d_model = 128):
//   [0, 64)   one-hot position
//   [64, 72)  class of the current token (sentiment words only)
//   [72, 80)  class of the previous token (written by the previous-token head)
//   [80, 88)  label slot (label tokens only; read out by the unembedding)
//
// Heads:
//   (0,0) previous-token head: copies the current-class block into the previous-class block
//   (0,1) idle (zero weights; uniform causal attention, no output)
//   (1,0) induction head: current class (query) matches previous class (key), copies the label slot
//   (1,1) uniform over strictly earlier tokens, no output
//
// Prompts use the drop-all layout "<bos> text label\n ... text" where each text
// ends with a sentiment word, so the forerunner is that word and every label
// token directly follows one.

#include "iclc/circuit_scan.hpp"
#include "iclc/model.hpp"
#include "iclc/prompt.hpp"
#include "iclc/tokenizer.hpp"

#include <fstream>
#include <map>
#include <set>
#include <random>
#include <string>
#include <vector>

namespace iclc::fixture {

inline constexpr int kDModel = 128;
inline constexpr int kMaxSeq = 64;
inline constexpr int kPos = 0;
inline constexpr int kCur = 64;
inline constexpr int kPrev = 72;
inline constexpr int kLab = 80;
inline constexpr float kPrevScale = 240.0f;      // pre-scale score of the previous-token match
inline constexpr float kMatchScale = 160.0f;     // pre-scale score of an induction match
inline constexpr float kSelfPenalty = 1600.0f;   // pre-scale self score of the uniform head
inline constexpr float kLabelLogit = 10.0f;

inline const std::vector<std::string>& positive_words() {
  static const std::vector<std::string> w = {"great", "superb", "lovely", "brilliant", "charming", "moving"};
  return w;
}
inline const std::vector<std::string>& negative_words() {
  static const std::vector<std::string> w = {"awful", "boring", "dull", "clumsy", "tedious", "bland"};
  return w;
}
inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w = {"the",   "movie", "film", "plot",  "was",   "and",  "really",
                                             "acting", "story", "very", "quite", "it",    "is",   "this",
                                             "cast",  "script", "ending", "pace", "scenes", "felt"};
  return w;
}

struct Fixture {
  Model model;
  Tokenizer tokenizer;
  std::map<std::string, int> vocab;
  std::vector<std::pair<std::string, std::string>> merges;
  Template tmpl;
  int bos_id = 0;
  std::vector<int> label_tokens;   // " positive", " negative"
  std::vector<int> letter_tokens;  // " A", " B"

  static constexpr HeadId previous_token_head{0, 0};
  static constexpr HeadId idle_head{0, 1};
  static constexpr HeadId induction_head{1, 0};
  static constexpr HeadId uniform_head{1, 1};
};

inline Template fixture_template() {
  Template t;
  t.name = "fixture-drop-all";
  t.input_prefix = "";
  t.forerunner = "";
  t.unit_suffix = "\n";
  t.labels = {"positive", "negative"};
  t.label_verbalizer = {" positive", " negative"};
  t.forerunner_from_text = true;
  return t;
}

inline Fixture build() {
  Fixture fx;
  const std::string space = Tokenizer::byte_symbol(' ');
  for (int b = 0; b < 256; ++b) fx.vocab[Tokenizer::byte_symbol(static_cast<unsigned char>(b))] = b;
  int next_id = 256;
  std::set<std::pair<std::string, std::string>> seen;
  auto add_word = [&](const std::string& w) {
    std::string acc = space;
    for (char c : w) {
      const std::string piece = Tokenizer::byte_symbol(static_cast<unsigned char>(c));
      if (seen.emplace(acc, piece).second) fx.merges.emplace_back(acc, piece);
      acc += piece;
      if (!fx.vocab.count(acc)) fx.vocab[acc] = next_id++;
    }
    return fx.vocab.at(acc);
  };
  std::vector<std::pair<int, int>> class_words;  // (token, class)
  for (const auto& w : positive_words()) class_words.emplace_back(add_word(w), 0);
  for (const auto& w : negative_words()) class_words.emplace_back(add_word(w), 1);
  for (const auto& w : filler_words()) add_word(w);
  fx.label_tokens = {add_word("positive"), add_word("negative")};
  fx.letter_tokens = {add_word("A"), add_word("B")};
  fx.bos_id = next_id++;
  fx.vocab["<|endoftext|>"] = fx.bos_id;
  fx.tokenizer = Tokenizer::from_data(fx.vocab, fx.merges);
  fx.tmpl = fixture_template();

  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = kDModel;
  cfg.d_head = kDModel / 2;
  cfg.vocab_size = next_id;
  cfg.max_seq = kMaxSeq;
  cfg.norm_kind = NormKind::none;
  cfg.pos_kind = PosKind::learned;
  cfg.mlp_kind = MlpKind::none;
  cfg.tie_embeddings = false;
  cfg.bias = false;
  cfg.layout = "gpt2";
  cfg.bos_token_id = fx.bos_id;
  cfg.tag = "synthetic-induction-fixture";
  cfg.validate();

  Model& m = fx.model;
  m.config = cfg;
  const int V = cfg.vocab_size;
  const int dh = cfg.d_head;
  m.token_embedding = Matrix::Zero(V, kDModel);
  for (const auto& [tok, cls] : class_words) m.token_embedding(tok, kCur + cls) = 1.0f;
  for (int y = 0; y < 2; ++y) {
    m.token_embedding(fx.label_tokens[static_cast<std::size_t>(y)], kLab + y) = 1.0f;
    m.token_embedding(fx.letter_tokens[static_cast<std::size_t>(y)], kLab + y) = 1.0f;
  }
  m.position_embedding = Matrix::Zero(kMaxSeq, kDModel);
  for (int p = 0; p < kMaxSeq; ++p) m.position_embedding(p, kPos + p) = 1.0f;

  auto empty_block = [&] {
    Block b;
    b.attn.wq = Matrix::Zero(kDModel, kDModel);
    b.attn.wk = Matrix::Zero(kDModel, kDModel);
    b.attn.wv = Matrix::Zero(kDModel, kDModel);
    b.attn.wo = Matrix::Zero(kDModel, kDModel);
    return b;
  };
  Block b0 = empty_block();
  for (int i = 1; i < kMaxSeq; ++i) b0.attn.wq(kPos + i, i - 1) = kPrevScale;
  for (int j = 0; j < kMaxSeq; ++j) b0.attn.wk(kPos + j, j) = 1.0f;
  for (int c = 0; c < 8; ++c) {
    b0.attn.wv(kCur + c, c) = 1.0f;
    b0.attn.wo(c, kPrev + c) = 1.0f;
  }
  Block b1 = empty_block();
  for (int c = 0; c < 8; ++c) {
    b1.attn.wq(kCur + c, c) = kMatchScale;
    b1.attn.wk(kPrev + c, c) = 1.0f;
    b1.attn.wv(kLab + c, c) = 1.0f;
    b1.attn.wo(c, kLab + c) = 1.0f;
  }
  for (int p = 0; p < kMaxSeq; ++p) {
    b1.attn.wq(kPos + p, dh + p) = -kSelfPenalty;
    b1.attn.wk(kPos + p, dh + p) = 1.0f;
  }
  m.blocks = {b0, b1};
  m.unembedding = Matrix::Zero(kDModel, V);
  for (int y = 0; y < 2; ++y) {
    m.unembedding(kLab + y, fx.label_tokens[static_cast<std::size_t>(y)]) = kLabelLogit;
    m.unembedding(kLab + y, fx.letter_tokens[static_cast<std::size_t>(y)]) = kLabelLogit;
  }
  return fx;
}

// Sentences " w1 w2 ... sentiment-word" with 4..7 filler words; labels alternate.
inline std::vector<LabeledExample> make_dataset(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LabeledExample> out;
  for (int i = 0; i < n; ++i) {
    LabeledExample ex;
    ex.label = i % 2;
    ex.id = i;
    std::uniform_int_distribution<int> len(4, 7);
    std::uniform_int_distribution<std::size_t> fill(0, filler_words().size() - 1);
    const int m = len(rng);
    for (int j = 0; j < m; ++j) ex.text += " " + filler_words()[fill(rng)];
    const auto& words = ex.label == 0 ? positive_words() : negative_words();
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    ex.text += " " + words[pick(rng)];
    out.push_back(std::move(ex));
  }
  return out;
}

// `n` k-shot inputs: query i uses example i of `queries`, demos drawn from `pool`.
inline std::vector<IclInput> make_inputs(const Fixture& fx, const std::vector<LabeledExample>& pool,
                                         const std::vector<LabeledExample>& queries, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BuildOptions opts;
  opts.bos_id = fx.bos_id;
  std::vector<IclInput> out;
  for (const auto& q : queries) {
    const auto demos = sample_demos(pool, k, fx.tmpl.n_labels(), rng);
    out.push_back(build_icl_input(fx.tokenizer, demos, q, fx.tmpl, opts));
  }
  return out;
}

// Writes model, tokenizer files, template and a dataset into `dir`.
inline void write(const Fixture& fx, const std::string& dir, int dataset_size = 256, std::uint64_t seed = 7) {
  save_model(fx.model, dir);
  nlohmann::json vj(fx.vocab);
  std::ofstream(dir + "/vocab.json") << vj.dump() << "\n";
  std::ofstream merges(dir + "/merges.txt");
  merges << "#version: 0.2\n";
  for (const auto& [a, b] : fx.merges) merges << a << " " << b << "\n";
  nlohmann::json tj = fx.tmpl;
  std::ofstream(dir + "/template.json") << tj.dump(2) << "\n";
  std::ofstream data(dir + "/dataset.jsonl");
  for (const auto& ex : make_dataset(dataset_size, seed)) {
    data << nlohmann::json{{"text", ex.text}, {"label", fx.tmpl.labels[static_cast<std::size_t>(ex.label)]}}.dump()
         << "\n";
  }
}

}  // namespace iclc::fixture
