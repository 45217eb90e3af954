#include "iclc/model.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

using namespace iclc;
using namespace iclc::testing;

namespace {

// Straight-loop double-precision reference forward. Shares no code with the
// library's forward pass.
struct NaiveOut {
  std::vector<std::vector<std::vector<double>>> hidden;               // [layer][t][d]
  std::vector<std::vector<std::vector<std::vector<double>>>> attn;    // [layer][head][i][j]
  std::vector<std::vector<double>> logits;                            // [t][v]
};

using Mat = std::vector<std::vector<double>>;

Mat matmul(const Mat& a, const Matrix& w) {
  Mat out(a.size(), std::vector<double>(static_cast<std::size_t>(w.cols()), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index k = 0; k < w.rows(); ++k)
      for (Eigen::Index j = 0; j < w.cols(); ++j) out[i][static_cast<std::size_t>(j)] += a[i][static_cast<std::size_t>(k)] * w(k, j);
  return out;
}

void add_bias(Mat& a, const Vector& b) {
  if (b.size() == 0) return;
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b(static_cast<Eigen::Index>(j));
}

Mat norm(const ModelConfig& cfg, const NormWeights& w, const Mat& x) {
  if (cfg.norm_kind == NormKind::none) return x;
  Mat out = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double n = static_cast<double>(x[t].size());
    if (cfg.norm_kind == NormKind::layernorm) {
      double mean = 0, var = 0;
      for (double v : x[t]) mean += v;
      mean /= n;
      for (double v : x[t]) var += (v - mean) * (v - mean);
      var /= n;
      for (std::size_t j = 0; j < x[t].size(); ++j)
        out[t][j] = (x[t][j] - mean) / std::sqrt(var + cfg.norm_eps) * w.weight(static_cast<Eigen::Index>(j)) + w.bias(static_cast<Eigen::Index>(j));
    } else {
      double ms = 0;
      for (double v : x[t]) ms += v * v;
      ms /= n;
      for (std::size_t j = 0; j < x[t].size(); ++j) out[t][j] = x[t][j] / std::sqrt(ms + cfg.norm_eps) * w.weight(static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

void rotate(Mat& m, int off, int dh, double base) {
  const int half = dh / 2;
  for (std::size_t t = 0; t < m.size(); ++t) {
    for (int i = 0; i < half; ++i) {
      const double theta = static_cast<double>(t) * std::pow(base, -2.0 * i / dh);
      const double a = m[t][static_cast<std::size_t>(off + i)];
      const double b = m[t][static_cast<std::size_t>(off + i + half)];
      m[t][static_cast<std::size_t>(off + i)] = a * std::cos(theta) - b * std::sin(theta);
      m[t][static_cast<std::size_t>(off + i + half)] = b * std::cos(theta) + a * std::sin(theta);
    }
  }
}

NaiveOut naive_forward(const Model& model, const std::vector<int>& tokens) {
  const auto& cfg = model.config;
  const std::size_t T = tokens.size();
  const int dh = cfg.d_head;
  NaiveOut out;
  Mat x(T, std::vector<double>(static_cast<std::size_t>(cfg.d_model)));
  for (std::size_t t = 0; t < T; ++t)
    for (int j = 0; j < cfg.d_model; ++j) {
      x[t][static_cast<std::size_t>(j)] = model.token_embedding(tokens[t], j);
      if (cfg.pos_kind == PosKind::learned) x[t][static_cast<std::size_t>(j)] += model.position_embedding(static_cast<Eigen::Index>(t), j);
    }
  out.hidden.push_back(x);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& b = model.blocks[static_cast<std::size_t>(l)];
    const Mat a = norm(cfg, b.ln_attn, x);
    Mat q = matmul(a, b.attn.wq), k = matmul(a, b.attn.wk), v = matmul(a, b.attn.wv);
    add_bias(q, b.attn.bq);
    add_bias(k, b.attn.bk);
    add_bias(v, b.attn.bv);
    if (cfg.pos_kind == PosKind::rotary)
      for (int h = 0; h < cfg.n_heads; ++h) {
        rotate(q, h * dh, dh, cfg.rope_base);
        rotate(k, h * dh, dh, cfg.rope_base);
      }
    Mat mixed(T, std::vector<double>(static_cast<std::size_t>(cfg.d_model), 0.0));
    out.attn.emplace_back();
    for (int h = 0; h < cfg.n_heads; ++h) {
      Mat p(T, std::vector<double>(T, 0.0));
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (int c = 0; c < dh; ++c) dot += q[i][static_cast<std::size_t>(h * dh + c)] * k[j][static_cast<std::size_t>(h * dh + c)];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j <= i; ++j) p[i][j] = std::exp(s[j] - mx) / z;
        for (std::size_t j = 0; j <= i; ++j)
          for (int c = 0; c < dh; ++c) mixed[i][static_cast<std::size_t>(h * dh + c)] += p[i][j] * v[j][static_cast<std::size_t>(h * dh + c)];
      }
      out.attn.back().push_back(p);
    }
    Mat o = matmul(mixed, b.attn.wo);
    add_bias(o, b.attn.bo);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < x[t].size(); ++j) x[t][j] += o[t][j];
    if (cfg.mlp_kind != MlpKind::none) {
      const Mat m = norm(cfg, b.ln_mlp, x);
      Mat hmid = matmul(m, b.mlp.w_in);
      add_bias(hmid, b.mlp.b_in);
      if (cfg.mlp_kind == MlpKind::gelu) {
        for (auto& row : hmid)
          for (double& z : row) z = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (z + 0.044715 * z * z * z)));
      } else {
        const Mat g = matmul(m, b.mlp.w_gate);
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < hmid[t].size(); ++j) hmid[t][j] *= g[t][j] / (1.0 + std::exp(-g[t][j]));
      }
      Mat o2 = matmul(hmid, b.mlp.w_out);
      add_bias(o2, b.mlp.b_out);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < x[t].size(); ++j) x[t][j] += o2[t][j];
    }
    out.hidden.push_back(x);
  }
  out.logits = matmul(norm(cfg, model.final_norm, x), model.unembedding);
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

void expect_matches_naive(const Model& m, const std::vector<int>& tokens, double tol) {
  const auto tr = forward(m, tokens);
  const auto ref = naive_forward(m, tokens);
  ASSERT_EQ(tr.hidden.size(), ref.hidden.size());
  for (std::size_t l = 0; l < ref.hidden.size(); ++l)
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (std::size_t j = 0; j < ref.hidden[l][t].size(); ++j)
        ASSERT_LT(rel_err(tr.hidden[l](static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)), ref.hidden[l][t][j]), tol)
            << "hidden l=" << l << " t=" << t << " j=" << j;
  for (std::size_t l = 0; l < ref.attn.size(); ++l)
    for (std::size_t h = 0; h < ref.attn[l].size(); ++h)
      for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < tokens.size(); ++j)
          ASSERT_NEAR(tr.attn[l][h](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), ref.attn[l][h][i][j], tol);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t v = 0; v < ref.logits[t].size(); ++v)
      ASSERT_LT(rel_err(tr.logits(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)), ref.logits[t][v]), tol);
}

std::vector<int> random_tokens(std::uint64_t seed, int n, int vocab) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& x : t) x = d(rng);
  return t;
}

}  // namespace

struct ArchCase {
  NormKind norm;
  PosKind pos;
  MlpKind mlp;
  bool bias;
  const char* layout;
};

class ForwardVsNaive : public ::testing::TestWithParam<ArchCase> {};

TEST_P(ForwardVsNaive, MatchesDoublePrecisionReference) {
  const auto c = GetParam();
  const auto m = random_model(small_config(c.norm, c.pos, c.mlp, c.bias, c.layout), 42);
  expect_matches_naive(m, random_tokens(7, 17, m.config.vocab_size), 2e-4);
}

INSTANTIATE_TEST_SUITE_P(
    Architectures, ForwardVsNaive,
    ::testing::Values(ArchCase{NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2"},
                      ArchCase{NormKind::layernorm, PosKind::learned, MlpKind::gelu, false, "gpt2"},
                      ArchCase{NormKind::rmsnorm, PosKind::rotary, MlpKind::silu_gated, false, "llama"},
                      ArchCase{NormKind::rmsnorm, PosKind::rotary, MlpKind::silu_gated, true, "llama"},
                      ArchCase{NormKind::none, PosKind::none, MlpKind::none, false, "gpt2"},
                      ArchCase{NormKind::layernorm, PosKind::rotary, MlpKind::gelu, true, "llama"}));

// ---------------------------------------------------------------------------
// Hugging Face reference forwards (tools/make_golden.py)

class HfGolden : public ::testing::TestWithParam<const char*> {};

TEST_P(HfGolden, LoadsAndMatchesReference) {
  const std::string dir = data_path(std::string("golden/") + GetParam());
  const Model m = load_model(dir + "/model.safetensors", dir + "/config.json");
  const auto g = read_json(dir + "/golden.json");
  const auto tokens = g.at("tokens").get<std::vector<int>>();
  const auto tr = forward(m, tokens);
  const auto hidden = g.at("hidden").get<std::vector<std::vector<std::vector<double>>>>();
  ASSERT_EQ(hidden.size(), static_cast<std::size_t>(m.config.n_layers));
  for (std::size_t l = 0; l < hidden.size(); ++l)
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (std::size_t j = 0; j < hidden[l][t].size(); ++j)
        ASSERT_LT(rel_err(tr.hidden[l](static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)), hidden[l][t][j]), 1e-4)
            << "layer " << l << " token " << t << " dim " << j;
  const auto logits = g.at("logits").get<std::vector<std::vector<double>>>();
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t v = 0; v < logits[t].size(); ++v)
      ASSERT_LT(rel_err(tr.logits(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)), logits[t][v]), 1e-4);
  const auto attn = g.at("attentions").get<std::vector<std::vector<std::vector<std::vector<double>>>>>();
  for (std::size_t l = 0; l < attn.size(); ++l)
    for (std::size_t h = 0; h < attn[l].size(); ++h)
      for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < tokens.size(); ++j)
          ASSERT_NEAR(tr.attn[l][h](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), attn[l][h][i][j], 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Archives, HfGolden, ::testing::Values("gpt2", "llama"));

// ---------------------------------------------------------------------------
// Loading and saving

TEST(ModelIo, SaveLoadRoundTripIsExactInF32) {
  for (const auto& c : {small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2"),
                        small_config(NormKind::rmsnorm, PosKind::rotary, MlpKind::silu_gated, false, "llama")}) {
    const auto m = random_model(c, 3);
    const auto dir = temp_dir("roundtrip_" + c.layout);
    save_model(m, dir.string());
    const auto back = load_model((dir / "model.safetensors").string(), (dir / "config.json").string());
    const auto tokens = random_tokens(1, 10, c.vocab_size);
    EXPECT_TRUE(forward_logits(m, tokens) == forward_logits(back, tokens)) << c.layout;
    EXPECT_EQ(back.parameter_count(c.n_layers), m.parameter_count(c.n_layers));
  }
}

TEST(ModelIo, F16RoundTripIsClose) {
  const auto c = small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2");
  const auto m = random_model(c, 5);
  const auto dir = temp_dir("roundtrip_f16");
  save_model(m, dir.string(), StoreDtype::f16);
  const auto back = load_model((dir / "model.safetensors").string(), (dir / "config.json").string());
  const auto tokens = random_tokens(2, 10, c.vocab_size);
  EXPECT_LT((forward_logits(m, tokens) - forward_logits(back, tokens)).cwiseAbs().maxCoeff(), 0.05f);
}

TEST(ModelIo, MissingTensorIsNamed) {
  const auto c = small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2");
  auto tensors = model_tensors(random_model(c, 1));
  tensors.erase("h.1.attn.c_proj.weight");
  const auto dir = temp_dir("missing");
  write_safetensors((dir / "model.safetensors").string(), tensors, {}, StoreDtype::f32);
  try {
    (void)load_model(SafetensorsArchive::load((dir / "model.safetensors").string()), c);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("h.1.attn.c_proj.weight"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, ShapeMismatchIsReported) {
  const auto c = small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2");
  auto bigger = c;
  bigger.vocab_size = 41;
  const auto dir = temp_dir("shape");
  write_safetensors((dir / "model.safetensors").string(), model_tensors(random_model(c, 1)), {}, StoreDtype::f32);
  try {
    (void)load_model(SafetensorsArchive::load((dir / "model.safetensors").string()), bigger);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    const std::string w = e.what();
    EXPECT_NE(w.find("wte.weight"), std::string::npos) << w;
    EXPECT_NE(w.find("[41, 16]"), std::string::npos) << w;
  }
}

TEST(ModelIo, HeadDimensionMismatchMessage) {
  ModelConfig c = small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2");
  c.d_model = 64;
  c.n_heads = 5;
  c.d_head = 16;
  try {
    c.validate();
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads x d_head (5 x 16 = 80) != d_model (64)"), std::string::npos);
  }
}

TEST(ModelIo, HfConfigsParse) {
  const auto g = load_model_config(data_path("golden/gpt2/config.json"));
  EXPECT_EQ(g.layout, "gpt2");
  EXPECT_EQ(g.n_layers, 3);
  EXPECT_EQ(g.d_head, 8);
  EXPECT_TRUE(g.tie_embeddings);
  const auto l = load_model_config(data_path("golden/llama/config.json"));
  EXPECT_EQ(l.layout, "llama");
  EXPECT_EQ(l.norm_kind, NormKind::rmsnorm);
  EXPECT_EQ(l.pos_kind, PosKind::rotary);
  EXPECT_FALSE(l.tie_embeddings);
  EXPECT_FLOAT_EQ(l.rope_base, 10000.0f);
  nlohmann::json gqa = read_json(data_path("golden/llama/config.json"));
  gqa["num_key_value_heads"] = 1;
  EXPECT_THROW((void)model_config_from_json(gqa), LoadError);
}

// ---------------------------------------------------------------------------
// Forward properties

class ForwardProps : public ::testing::Test {
 protected:
  Model m = random_model(small_config(NormKind::layernorm, PosKind::learned, MlpKind::gelu, true, "gpt2"), 11);
  std::vector<int> tokens = random_tokens(3, 12, 40);
};

TEST_F(ForwardProps, AttentionRowsAreCausalDistributions) {
  const auto tr = forward(m, tokens);
  for (const auto& layer : tr.attn)
    for (const auto& a : layer)
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        EXPECT_NEAR(a.row(i).sum(), 1.0f, 1e-5f);
        for (Eigen::Index j = i + 1; j < a.cols(); ++j) EXPECT_EQ(a(i, j), 0.0f);
      }
}

TEST_F(ForwardProps, EmptySpecIsBitExact) {
  const auto tr = forward(m, tokens, InterventionSpec{});
  EXPECT_TRUE(tr.logits == forward_logits(m, tokens));
}

TEST_F(ForwardProps, TruncatedForwardIsAPrefix) {
  const auto full = forward(m, tokens);
  for (int n = 0; n <= m.config.n_layers; ++n) {
    const auto part = forward_truncated(m, tokens, n);
    ASSERT_EQ(part.size(), static_cast<std::size_t>(n + 1));
    for (int l = 0; l <= n; ++l) EXPECT_TRUE(part[static_cast<std::size_t>(l)] == full.hidden[static_cast<std::size_t>(l)]);
  }
  EXPECT_THROW((void)forward_truncated(m, tokens, m.config.n_layers + 1), ArgumentError);
}

TEST_F(ForwardProps, ZeroPostSoftmaxRemovesOnlyTheEdge) {
  InterventionSpec spec;
  spec.add(1, 0, 7, 3);
  const auto base = forward(m, tokens);
  const auto cut = forward(m, tokens, spec);
  // Layer 0 and hidden[0..1] are untouched.
  EXPECT_TRUE(cut.hidden[1] == base.hidden[1]);
  EXPECT_EQ(cut.attn[1][0](7, 3), 0.0f);
  // No renormalisation: the remaining entries of the row keep their values.
  for (Eigen::Index j = 0; j <= 7; ++j) {
    if (j != 3) {
      EXPECT_EQ(cut.attn[1][0](7, j), base.attn[1][0](7, j));
    }
  }
  EXPECT_NEAR(cut.attn[1][0].row(7).sum(), 1.0f - base.attn[1][0](7, 3), 1e-6f);
  EXPECT_TRUE(cut.attn[1][1] == base.attn[1][1]);
  EXPECT_FALSE(cut.hidden[2] == base.hidden[2]);
}

TEST_F(ForwardProps, MaskPreSoftmaxRenormalises) {
  InterventionSpec spec;
  spec.mode = InterventionMode::mask_pre_softmax;
  spec.add(0, kAllHeads, 5, 2);
  const auto base = forward(m, tokens);
  const auto cut = forward(m, tokens, spec);
  for (int h = 0; h < m.config.n_heads; ++h) {
    EXPECT_EQ(cut.attn[0][static_cast<std::size_t>(h)](5, 2), 0.0f);
    EXPECT_NEAR(cut.attn[0][static_cast<std::size_t>(h)].row(5).sum(), 1.0f, 1e-5f);
    const float keep = 1.0f - base.attn[0][static_cast<std::size_t>(h)](5, 2);
    EXPECT_NEAR(cut.attn[0][static_cast<std::size_t>(h)](5, 0), base.attn[0][static_cast<std::size_t>(h)](5, 0) / keep, 1e-5f);
  }
}

TEST_F(ForwardProps, FullyMaskedRowIsZero) {
  InterventionSpec spec;
  spec.mode = InterventionMode::mask_pre_softmax;
  for (int k = 0; k <= 2; ++k) spec.add(0, 1, 2, k);
  const auto cut = forward(m, tokens, spec);
  EXPECT_EQ(cut.attn[0][1].row(2).sum(), 0.0f);
  EXPECT_TRUE(cut.logits.allFinite());
}

TEST_F(ForwardProps, InvalidEdgesAreRejected) {
  InterventionSpec acausal;
  acausal.add(0, 0, 2, 5);
  EXPECT_THROW((void)forward(m, tokens, acausal), ArgumentError);
  InterventionSpec bad_layer;
  bad_layer.add(3, 0, 2, 1);
  EXPECT_THROW((void)forward(m, tokens, bad_layer), ArgumentError);
  InterventionSpec bad_head;
  bad_head.add(0, 2, 2, 1);
  EXPECT_THROW((void)forward(m, tokens, bad_head), ArgumentError);
  InterventionSpec bad_token;
  bad_token.add(0, 0, 12, 1);
  EXPECT_THROW((void)forward(m, tokens, bad_token), ArgumentError);
}

TEST_F(ForwardProps, BadTokensAreRejected) {
  EXPECT_THROW((void)forward(m, std::vector<int>{}), ArgumentError);
  EXPECT_THROW((void)forward(m, std::vector<int>{1, 40}), ArgumentError);
  EXPECT_THROW((void)forward(m, std::vector<int>(25, 1)), ArgumentError);
}

TEST_F(ForwardProps, UnembedMatchesLogitsRow) {
  const auto tr = forward(m, tokens);
  const VectorD row = unembed(m, tr.hidden.back().row(4).transpose());
  for (Eigen::Index v = 0; v < row.size(); ++v) EXPECT_NEAR(row(v), tr.logits(4, v), 1e-5);
}

TEST(QkKernel, BilinearFormReproducesScores) {
  // No biases and no positions, so the pre-softmax score is a^T K b exactly.
  auto c = small_config(NormKind::layernorm, PosKind::none, MlpKind::gelu, false, "gpt2");
  const auto m = random_model(c, 9);
  const auto tokens = random_tokens(5, 8, c.vocab_size);
  const auto tr = forward(m, tokens);
  Matrix a;
  detail::apply_norm(c, m.blocks[1].ln_attn, tr.hidden[1], a);
  for (int h = 0; h < c.n_heads; ++h) {
    const MatrixD K = qk_kernel(m, 1, h);
    const MatrixD A = a.cast<double>();
    for (int i = 0; i < 8; ++i) {
      std::vector<double> s;
      for (int j = 0; j <= i; ++j) s.push_back(A.row(i).dot(K * A.row(j).transpose()) / std::sqrt(8.0));
      const auto p = softmax(s);
      for (int j = 0; j <= i; ++j) EXPECT_NEAR(p[static_cast<std::size_t>(j)], tr.attn[1][static_cast<std::size_t>(h)](i, j), 1e-5);
    }
  }
}
