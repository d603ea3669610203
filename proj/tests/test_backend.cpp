#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <thread>

#include "steerlab/activations.hpp"
#include "steerlab/generation.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/toy_backend.hpp"

using namespace steerlab;

namespace {

// Straightforward full-sequence forward in double precision, written against
// the raw weight arrays only.
std::vector<std::vector<double>> reference_logits(const ToyTransformer& m, const std::vector<int>& toks) {
  const auto& c = m.config();
  const auto& W = m.weights();
  const int T = static_cast<int>(toks.size()), D = c.d_model, H = c.num_heads, Dh = D / H, F = c.d_ff, V = 256;
  auto at = [](const std::vector<float>& w, int r, int col, int cols) { return static_cast<double>(w[r * cols + col]); };
  auto rms = [&](const std::vector<double>& x, const std::vector<float>& g) {
    double ss = 0;
    for (double v : x) ss += v * v;
    double inv = 1.0 / std::sqrt(ss / D + 1e-6);
    std::vector<double> y(D);
    for (int i = 0; i < D; ++i) y[i] = x[i] * inv * g[i];
    return y;
  };
  std::vector<std::vector<double>> X(T, std::vector<double>(D));
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < D; ++i) X[t][i] = at(W.tok_emb, toks[t], i, D) + at(W.pos_emb, t, i, D);
  }
  for (const auto& L : W.layers) {
    std::vector<std::vector<double>> Q(T, std::vector<double>(D)), K = Q, Vv = Q;
    for (int t = 0; t < T; ++t) {
      auto h = rms(X[t], L.attn_norm);
      for (int o = 0; o < D; ++o) {
        for (int i = 0; i < D; ++i) {
          Q[t][o] += at(L.wq, o, i, D) * h[i];
          K[t][o] += at(L.wk, o, i, D) * h[i];
          Vv[t][o] += at(L.wv, o, i, D) * h[i];
        }
      }
    }
    auto Xn = X;
    for (int t = 0; t < T; ++t) {
      std::vector<double> z(D, 0.0);
      for (int hh = 0; hh < H; ++hh) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (int j = 0; j <= t; ++j) {
          double acc = 0;
          for (int i = 0; i < Dh; ++i) acc += Q[t][hh * Dh + i] * K[j][hh * Dh + i];
          s[j] = acc / std::sqrt(static_cast<double>(Dh));
          mx = std::max(mx, s[j]);
        }
        double sum = 0;
        for (auto& v : s) sum += (v = std::exp(v - mx));
        for (int j = 0; j <= t; ++j) {
          for (int i = 0; i < Dh; ++i) z[hh * Dh + i] += s[j] / sum * Vv[j][hh * Dh + i];
        }
      }
      for (int o = 0; o < D; ++o) {
        for (int i = 0; i < D; ++i) Xn[t][o] += at(L.wo, o, i, D) * z[i];
      }
      auto h = rms(Xn[t], L.mlp_norm);
      std::vector<double> up(F);
      for (int f = 0; f < F; ++f) {
        double acc = L.b_up[f];
        for (int i = 0; i < D; ++i) acc += at(L.w_up, f, i, D) * h[i];
        up[f] = 0.5 * acc * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (acc + 0.044715 * acc * acc * acc)));
      }
      for (int o = 0; o < D; ++o) {
        double acc = 0;
        for (int f = 0; f < F; ++f) acc += at(L.w_down, o, f, F) * up[f];
        Xn[t][o] += acc + L.b_down[o];
      }
    }
    X = Xn;
  }
  std::vector<std::vector<double>> logits(T, std::vector<double>(V));
  for (int t = 0; t < T; ++t) {
    auto h = rms(X[t], W.final_norm);
    for (int v = 0; v < V; ++v) {
      double acc = W.b_unembed[v];
      for (int i = 0; i < D; ++i) acc += at(W.w_unembed, v, i, D) * h[i];
      logits[t][v] = acc;
    }
  }
  return logits;
}

std::vector<int> prompt_tokens(const std::string& s) { return ByteTokenizer().encode(s); }

double max_rel_diff(const std::vector<float>& a, const std::vector<double>& b) {
  double scale = 0, diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

}  // namespace

TEST(Backend, ToyMatchesReferenceForward) {
  auto m = toy_backend(0);
  const auto toks = prompt_tokens("int main(void) { char buf[16]; ");
  const auto ref = reference_logits(*m, toks);
  auto session = m->open_session({}, static_cast<int>(toks.size()));
  // Check every position by feeding tokens one at a time.
  for (std::size_t t = 0; t < toks.size(); ++t) {
    const auto logits = session->append(std::span<const int>(&toks[t], 1));
    EXPECT_LT(max_rel_diff(logits, ref[t]), 1e-5) << "position " << t;
  }
}

TEST(Backend, InfoAndDeterminism) {
  auto a = toy_backend(0), b = toy_backend(0);
  const auto ia = describe(*a);
  EXPECT_EQ(ia.num_layers, 4);
  EXPECT_EQ(ia.d_model, 64);
  EXPECT_EQ(ia.vocab_size, 256);
  EXPECT_EQ(ia.last_layer_index, 3);
  EXPECT_EQ(ia.model_id, describe(*b).model_id);
  const auto toks = prompt_tokens("void f(char *s)");
  EXPECT_EQ(instrumented_forward(*a, toks).logits, instrumented_forward(*b, toks).logits);
  EXPECT_NE(instrumented_forward(*toy_backend(1), toks).logits, instrumented_forward(*a, toks).logits);
  EXPECT_THROW(toy_backend(0, 4, 64, 512), ValidationError);
}

TEST(Backend, EmptyPlanAndCapturesDoNotPerturb) {
  auto m = toy_backend(3);
  const auto toks = prompt_tokens("def handler(request):");
  const auto plain = instrumented_forward(*m, toks);
  ForwardPlan plan;
  for (int l = 0; l < 4; ++l) plan.captures.push_back({Site::layer_output(l), Position::all()});
  plan.captures.push_back({Site::head_output(2, 1), Position::last()});
  const auto observed = instrumented_forward(*m, toks, plan);
  EXPECT_EQ(plain.logits, observed.logits);
  EXPECT_EQ(observed.captured.size(), 4 * toks.size() + 1);
  // Chunked append matches a single append bit for bit.
  auto s = m->open_session({}, static_cast<int>(toks.size()));
  s->append(std::span<const int>(toks).first(5));
  EXPECT_EQ(s->append(std::span<const int>(toks).subspan(5)), plain.logits);
}

TEST(Backend, IdentityEmbeddingOverrideIsBitExact) {
  auto m = toy_backend(5);
  const auto toks = prompt_tokens("strcpy(dst, src);");
  ForwardPlan plan;
  std::vector<float> rep;
  for (int t = 2; t < 7; ++t) {
    const auto e = m->token_embedding(toks[t]);
    rep.insert(rep.end(), e.begin(), e.end());
  }
  plan.embedding_overrides.push_back({2, 7, rep});
  EXPECT_EQ(instrumented_forward(*m, toks, plan).logits, instrumented_forward(*m, toks).logits);
}

TEST(Backend, InjectionAdditivity) {
  auto m = toy_backend(2);
  const auto toks = prompt_tokens("printf(user_input);");
  ForwardPlan cap;
  cap.captures.push_back({Site::layer_output(2), Position::at(4)});
  const auto natural = instrumented_forward(*m, toks, cap).captured.at(0).vector;
  std::vector<float> d(64);
  for (int i = 0; i < 64; ++i) d[i] = std::sin(0.3 * i);
  const double alpha = 2.5;
  ForwardPlan inj = cap;
  inj.injections.push_back({2, Position::at(4), d, alpha});
  const auto steered = instrumented_forward(*m, toks, inj).captured.at(0).vector;
  for (int i = 0; i < 64; ++i) {
    const double expect = natural[i] + alpha * d[i];
    EXPECT_NEAR(steered[i], expect, 1e-6 * std::max(1.0, std::abs(expect)));
  }
}

TEST(Backend, PlanIsolationUnderInterleaving) {
  auto m = toy_backend(4);
  const auto t1 = prompt_tokens("sprintf(buf, fmt)");
  const auto t2 = prompt_tokens("cursor.execute(q)");
  ForwardPlan p1, p2;
  p1.injections.push_back({1, Position::all(), std::vector<float>(64, 0.5f), 1.0});
  p2.patches.push_back({Site::layer_input(2), Position::last(), std::vector<float>(64, -0.25f)});
  const auto seq1 = instrumented_forward(*m, t1, p1).logits;
  const auto seq2 = instrumented_forward(*m, t2, p2).logits;
  auto s1 = m->open_session(p1, static_cast<int>(t1.size()));
  auto s2 = m->open_session(p2, static_cast<int>(t2.size()));
  std::vector<float> l1, l2;
  for (std::size_t i = 0; i < std::max(t1.size(), t2.size()); ++i) {
    if (i < t1.size()) l1 = s1->append(std::span<const int>(&t1[i], 1));
    if (i < t2.size()) l2 = s2->append(std::span<const int>(&t2[i], 1));
  }
  EXPECT_EQ(l1, seq1);
  EXPECT_EQ(l2, seq2);
  // Also from two threads.
  std::vector<float> a, b;
  std::thread th1([&] { a = instrumented_forward(*m, t1, p1).logits; });
  std::thread th2([&] { b = instrumented_forward(*m, t2, p2).logits; });
  th1.join();
  th2.join();
  EXPECT_EQ(a, seq1);
  EXPECT_EQ(b, seq2);
}

TEST(Backend, FinalResidualPatchDominates) {
  auto m = toy_backend(6);
  const auto toks = prompt_tokens("os.system(cmd)");
  std::vector<float> v(64);
  for (int i = 0; i < 64; ++i) v[i] = std::cos(0.7 * i) * 3.0f;
  ForwardPlan plan;
  plan.patches.push_back({Site::final_residual(), Position::last(), v});
  EXPECT_EQ(softmax(instrumented_forward(*m, toks, plan).logits), unembed(*m, v, true));
}

TEST(Backend, UnembedIdentitiesAndReference) {
  auto m = toy_backend(1);
  const auto toks = prompt_tokens("char name[32];");
  ForwardPlan plan;
  plan.captures.push_back({Site::layer_output(3), Position::last()});
  const auto r = instrumented_forward(*m, toks, plan);
  const auto lens = unembed(*m, r.captured[0].vector, true);
  const auto model = softmax(r.logits);
  for (int v = 0; v < 256; ++v) EXPECT_NEAR(lens[v], model[v], 1e-5);

  const auto zero = unembed(*m, std::vector<float>(64, 0.0f), false);
  for (double p : zero) EXPECT_DOUBLE_EQ(p, 1.0 / 256);

  // softmax(W_U . norm(h)) by hand.
  const auto& W = m->weights();
  const auto& h = r.captured[0].vector;
  double ss = 0;
  for (float x : h) ss += double(x) * x;
  const double inv = 1.0 / std::sqrt(ss / 64 + 1e-6);
  std::vector<double> z(256);
  double mx = -1e300;
  for (int v = 0; v < 256; ++v) {
    for (int i = 0; i < 64; ++i) z[v] += double(W.w_unembed[v * 64 + i]) * h[i] * inv * W.final_norm[i];
    mx = std::max(mx, z[v]);
  }
  double sum = 0;
  for (auto& x : z) sum += (x = std::exp(x - mx));
  for (int v = 0; v < 256; ++v) EXPECT_NEAR(lens[v], z[v] / sum, 1e-5);

  EXPECT_THROW(unembed(*m, std::vector<float>(63), true), ValidationError);
}

TEST(Backend, InvalidPlansFailBeforeCompute) {
  auto m = toy_backend(0);
  const auto toks = prompt_tokens("abc");
  ForwardPlan bad_layer;
  bad_layer.captures.push_back({Site::layer_output(4), Position::last()});
  EXPECT_THROW(instrumented_forward(*m, toks, bad_layer), ValidationError);
  ForwardPlan bad_vec;
  bad_vec.injections.push_back({0, Position::all(), std::vector<float>(10), 1.0});
  EXPECT_THROW(instrumented_forward(*m, toks, bad_vec), ValidationError);
  ForwardPlan bad_span;
  bad_span.embedding_overrides.push_back({1, 9, std::vector<float>(64)});
  EXPECT_THROW(instrumented_forward(*m, toks, bad_span), ValidationError);
  ForwardPlan bad_pos;
  bad_pos.captures.push_back({Site::layer_output(0), Position::at(-1)});
  EXPECT_THROW(instrumented_forward(*m, toks, bad_pos), ValidationError);
}

TEST(Backend, HeadCapabilityGate) {
  ToyConfig c;
  c.expose_heads = false;
  ToyTransformer m(c);
  const auto toks = prompt_tokens("gets(buf);");
  ForwardPlan plan;
  plan.captures.push_back({Site::head_output(0, 0), Position::last()});
  EXPECT_THROW(instrumented_forward(m, toks, plan), CapabilityError);
  EXPECT_THROW(patch_heads(m, toks, toks, {{0, 0}}, 's'), CapabilityError);
  EXPECT_FALSE(describe(m).exposes_heads);
}

TEST(Backend, CheckpointRoundTripReportsId) {
  ToyConfig c;
  c.seed = 11;
  c.model_id = "toy-checkpoint-test";
  ToyTransformer m(c);
  const auto path = std::filesystem::temp_directory_path() / "steerlab_ckpt_test.bin";
  save_checkpoint(m, path);
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(describe(*loaded).model_id, "toy-checkpoint-test");
  const auto toks = prompt_tokens("snprintf(buf, sizeof buf, ");
  EXPECT_EQ(instrumented_forward(*loaded, toks).logits, instrumented_forward(m, toks).logits);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Generation, DefaultsMatchProtocol) {
  GenerationParams p;
  EXPECT_DOUBLE_EQ(p.temperature, 0.6);
  EXPECT_DOUBLE_EQ(p.top_p, 0.9);
  EXPECT_EQ(p.max_new_tokens, 512);
  GenerationParams bad;
  bad.min_new_tokens = 600;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = {};
  bad.top_p = 1.5;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Generation, SeededAndGreedyDecoding) {
  auto m = toy_backend(0);
  const auto toks = prompt_tokens("void copy(char *d, const char *s) {\n    ");
  GenerationParams p;
  p.max_new_tokens = 24;
  p.seed = 9;
  const auto a = generate(*m, toks, p), b = generate(*m, toks, p);
  EXPECT_EQ(a.tokens, b.tokens);
  p.seed = 10;
  const auto c = generate(*m, toks, p);
  EXPECT_NE(a.tokens, c.tokens);

  GenerationParams g;
  g.greedy = true;
  g.max_new_tokens = 8;
  const auto greedy = generate(*m, toks, g);
  // Greedy decoding equals a manual argmax loop.
  std::vector<int> seq = toks, manual;
  for (int i = 0; i < 8 && !greedy.stopped_at_eos; ++i) {
    const int next = argmax(instrumented_forward(*m, seq).logits);
    if (next == 0) break;
    manual.push_back(next);
    seq.push_back(next);
  }
  EXPECT_EQ(greedy.tokens, std::vector<int>(manual.begin(), manual.begin() + greedy.tokens.size()));

  GenerationParams zero;
  zero.max_new_tokens = 0;
  EXPECT_TRUE(generate(*m, toks, zero).tokens.empty());

  GenerationParams forced;
  forced.max_new_tokens = forced.min_new_tokens = 20;
  EXPECT_EQ(generate(*m, toks, forced).tokens.size(), 20u);
}

TEST(Generation, NucleusSamplingOracle) {
  // probabilities after softmax at T=1: 0.5, 0.3, 0.15, 0.05
  const std::vector<float> logits = {std::log(0.5f), std::log(0.3f), std::log(0.15f), std::log(0.05f)};
  // top_p 0.7 keeps {0, 1}; renormalized masses 0.625 / 0.375.
  EXPECT_EQ(sample_token(logits, 1.0, 0.7, 0.0), 0);
  EXPECT_EQ(sample_token(logits, 1.0, 0.7, 0.6), 0);
  EXPECT_EQ(sample_token(logits, 1.0, 0.7, 0.63), 1);
  EXPECT_EQ(sample_token(logits, 1.0, 0.7, 0.999), 1);
  // top_p 1.0 reaches the tail.
  EXPECT_EQ(sample_token(logits, 1.0, 1.0, 0.999), 3);
  EXPECT_EQ(sample_token(logits, 0.0, 0.9, 0.999), 0);
}

TEST(Activations, FileRoundTrip) {
  std::vector<ActivationRecord> recs(3);
  for (int i = 0; i < 3; ++i) {
    recs[i].layer = 3;
    recs[i].position = 10 + i;
    recs[i].prompt_id = "CWE-787/s" + std::to_string(i) + "/v0";
    recs[i].variant = i == 0 ? Variant::Secure : Variant::Insecure;
    recs[i].scenario_id = i;
    recs[i].cwe = Cwe::Cwe787;
    recs[i].vector = {1.5f * i, -0.1f, 3.0e-8f, 1e30f};
  }
  recs[1].behavioral_label = SecurityLabel::Other;
  const auto stem = std::filesystem::temp_directory_path() / "steerlab_acts_test";
  save_activations(stem, recs, "toy");
  const auto f = load_activations(stem);
  EXPECT_EQ(f.model_id, "toy");
  EXPECT_EQ(f.layer, 3);
  EXPECT_EQ(f.d_model, 4);
  ASSERT_EQ(f.records.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(f.records[i].vector, recs[i].vector);
    EXPECT_EQ(f.records[i].prompt_id, recs[i].prompt_id);
    EXPECT_EQ(f.records[i].variant, recs[i].variant);
    EXPECT_EQ(f.records[i].behavioral_label, recs[i].behavioral_label);
  }
  // Bytes are little-endian float32.
  const auto raw = read_text_file(stem.string() + ".f32");
  EXPECT_EQ(raw.size(), 3u * 4 * 4);
  EXPECT_EQ(static_cast<unsigned char>(raw[4 * 4 + 3]), 0x3f);  // 1.5f = 0x3fc00000
}
